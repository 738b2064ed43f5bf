"""Run configuration: geometry, adapter options and training schedule."""
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .corpus import CATEGORIES, DEFAULT_TEMPLATES
from .errors import ParameterError, ValidationError


@dataclass
class TrainConfig:
    # frame encoder geometry
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d: int = 32
    depth: int = 4
    heads: int = 0                  # 0 -> d // 16
    mlp_ratio: int = 4
    r: int = 2
    # adapter
    frames_per_clip: int = 8
    M: int = 2
    kernel_size: int = 3
    adapter_heads: int = 0          # 0 -> d // 16
    query_mode: str = "aligned"     # aligned | learnable
    use_sa: bool = True
    use_ca: bool = True
    use_conv: bool = True
    kv_pool: str = "all"            # all | cls
    noise_mode: str = "gumbel"      # gumbel | off (evaluation never adds noise)
    # text side
    text_seed: int = 0
    corpus_mode: str = "entities"   # entities | action_names
    corpus_categories: list = field(default_factory=lambda: list(CATEGORIES))
    templates: list = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    temperature: float = 0.07
    ground_weight: float = 1.0      # caption-grounding auxiliary term (0 disables)
    # optimisation
    epochs: int = 300
    warmup_epochs: int = 20
    batch_size: int = 32
    base_lr: float = 1e-2           # the encoder only learns regions at this rate; see grounding
    head_lr: float = 1e-2
    weight_decay: float = 1e-3
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    precision: str = "float32"
    eval_every: int = 0             # 0 -> only at the end

    def __post_init__(self):
        self.validate()

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def n_heads(self):
        return self.heads or max(1, self.d // 16)

    @property
    def n_adapter_heads(self):
        return self.adapter_heads or max(1, self.d // 16)

    @property
    def N(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def L(self):
        return self.depth - 1

    @property
    def R(self):
        return self.N + 1 - self.L * self.r

    def validate(self):
        if self.precision not in ("float32", "float64"):
            raise ParameterError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.depth < 2:
            raise ParameterError("depth must be >= 2")
        if self.image_size % self.patch_size:
            raise ParameterError("image_size must be divisible by patch_size")
        if self.d % self.n_heads or self.d % self.n_adapter_heads:
            raise ParameterError("d must be divisible by the head counts")
        if self.kernel_size % 2 == 0:
            raise ParameterError("kernel_size must be odd")
        if self.query_mode not in ("aligned", "learnable"):
            raise ParameterError(f"query_mode must be aligned or learnable, got {self.query_mode!r}")
        if self.kv_pool not in ("all", "cls"):
            raise ParameterError(f"kv_pool must be all or cls, got {self.kv_pool!r}")
        if self.noise_mode not in ("gumbel", "off"):
            raise ParameterError(f"noise_mode must be gumbel or off, got {self.noise_mode!r}")
        if self.corpus_mode not in ("entities", "action_names"):
            raise ParameterError(f"corpus_mode must be entities or action_names, got {self.corpus_mode!r}")
        if set(self.corpus_categories) - set(CATEGORIES):
            raise ParameterError(f"corpus_categories must be drawn from {CATEGORIES}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ParameterError("epochs must be non-negative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ParameterError("warmup_epochs must be smaller than epochs")
        if self.base_lr <= 0 or self.head_lr <= 0:
            raise ParameterError("learning rates must be positive")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.ground_weight < 0:
            raise ParameterError("ground_weight must be non-negative")
        if self.M < 0 or self.r < 0 or self.batch_size < 1 or self.frames_per_clip < 1:
            raise ParameterError("M, r must be >= 0; batch_size, frames_per_clip >= 1")
        for l in range(self.L):
            if 2 * self.r > self.N - l * self.r:
                raise ParameterError(f"r={self.r} too large for N={self.N} at merge block {l + 1}")
        if self.R < 2:
            raise ParameterError("token merging would leave no region tokens")

    def to_dict(self):
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return TrainConfig.from_dict(data)
