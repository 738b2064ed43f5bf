"""Central-difference gradient checking against reverse accumulation."""
from dataclasses import dataclass, field

import numpy as np

from .errors import NonDeterministicError, ParameterError
from .tensor import DecisionLog, Tensor, recording, replaying


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    mean_rel_error: dict = field(default_factory=dict)
    eps: float = 1e-6
    tolerance: float = 1e-6
    passed: bool = True

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def summary(self):
        lines = [f"eps={self.eps:g} tol={self.tolerance:g} passed={self.passed}"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name}: max {err:.3e} mean {self.mean_rel_error[name]:.3e}")
        return "\n".join(lines)


def relative_error(analytic, numeric, scale=None, floor=1e-12):
    """Per-coordinate |a - n| divided by a gradient magnitude.

    By default the magnitude is the larger max-abs entry of the two arrays.
    ``grad_check`` passes the max over every checked parameter instead, so a
    tensor whose true gradient is identically zero is judged against the
    function's overall gradient scale rather than its own rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if scale is None:
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    return np.abs(a - n) / max(scale, floor)


def numeric_gradient(f, params, eps=1e-6, log=None, oracle_dtype=np.float64,
                     coords=None):
    """Central differences of scalar ``f()`` wrt each tensor in ``params``.

    Parameters are promoted to ``oracle_dtype`` during evaluation. When
    ``log`` is given, recorded discrete decisions are replayed so the
    perturbed passes follow the same branches as the base pass.
    """
    saved = {name: p.data for name, p in params.items()}
    out = {}
    try:
        for p in params.values():
            p.data = p.data.astype(oracle_dtype)
        for name, p in params.items():
            grad = np.zeros(p.shape, dtype=np.float64)
            flat = p.data.reshape(-1)
            idx = range(flat.size) if coords is None or coords.get(name) is None else coords[name]
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _evaluate(f, log)
                flat[i] = orig - eps
                fm = _evaluate(f, log)
                flat[i] = orig
                grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
            out[name] = grad
    finally:
        for name, p in params.items():
            p.data = saved[name]
    return out


def _evaluate(f, log):
    if log is None:
        return float(f().data)
    with replaying(log):
        return float(f().data)


def grad_check(f, params, eps=1e-6, tolerance=1e-6, oracle_dtype=np.float64,
               max_coords=None, seed=0):
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    the leaf tensors in ``params`` (name -> Tensor). Analytic gradients are
    taken in the parameters' own precision; the finite-difference oracle runs
    in ``oracle_dtype``. ``max_coords`` caps the number of coordinates probed
    per parameter (random subset chosen with ``seed``).
    """
    if not (0 < eps <= 1e-2):
        raise ParameterError(f"eps must lie in (0, 1e-2], got {eps}")
    log = DecisionLog()
    with recording(log):
        first = f()
    with recording(DecisionLog()):
        second = f()
    if not np.array_equal(first.data, second.data):
        raise NonDeterministicError(
            "function value changed between identical calls; fix the seed of every stochastic op")

    for p in params.values():
        p.zero_grad()
    with replaying(log):
        loss = f()
    loss.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape))
                for name, p in params.items()}

    coords = None
    if max_coords is not None:
        rng = np.random.default_rng(seed)
        coords = {}
        for name, p in params.items():
            size = int(np.prod(p.shape))
            coords[name] = (None if size <= max_coords
                            else np.sort(rng.choice(size, max_coords, replace=False)))
    numeric = numeric_gradient(f, params, eps, log, oracle_dtype, coords)

    pairs = {}
    for name in params:
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        n = numeric[name].reshape(-1)
        if coords is not None and coords[name] is not None:
            a, n = a[coords[name]], n[coords[name]]
        pairs[name] = (a, n)
    scale = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
                 for a, n in pairs.values()), default=0.0)
    report = GradCheckReport(eps=eps, tolerance=tolerance)
    for name, (a, n) in pairs.items():
        err = relative_error(a, n, scale)
        report.max_rel_error[name] = float(err.max(initial=0.0))
        report.mean_rel_error[name] = float(err.mean()) if err.size else 0.0
    report.passed = report.worst < tolerance
    return report


def leaf(data, dtype=np.float64):
    """Convenience: a gradient-tracking leaf tensor."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
