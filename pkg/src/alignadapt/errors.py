"""Exception hierarchy. ``exit_code`` maps onto the CLI exit status table."""


class AltError(Exception):
    exit_code = 1


class ValidationError(AltError):
    """Input data or configuration failed validation."""


class ParameterError(ValidationError, ValueError):
    """An argument is outside its allowed range."""


class ShapeError(ValidationError, ValueError):
    """Tensor dimensions do not agree."""


class ContractError(AltError):
    """A caller broke an operation's precondition."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class IntegrityError(AltError):
    """Stored files are missing or do not match their recorded hashes."""

    exit_code = 2


class StaleCacheError(IntegrityError):
    pass


class NumericError(AltError):
    """Non-finite values or undefined numeric operations."""

    exit_code = 3


class NonDeterministicError(ContractError):
    pass
