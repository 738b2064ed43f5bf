"""Analytic multiply-add counts and wall-clock timing for the merged encoder.

Counts are in multiply-add units. Only ratios between geometries are meant
to be compared with published GFLOPs figures.
"""
import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class ModelGeometry:
    N: int = 16                 # patches per frame
    d: int = 32
    depth: int = 4
    heads: int = 2
    r: int = 2
    L: int = 3                  # merge-active blocks feeding the alignment
    T: int = 8
    M: int = 2
    K: int = 15
    mlp_ratio: int = 4
    kernel_size: int = 3

    def __post_init__(self):
        for name in ("N", "d", "depth", "heads", "T", "K", "mlp_ratio", "kernel_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.r < 0 or self.M < 0 or self.L < 0:
            raise ParameterError("r, M and L must be non-negative")
        if self.L > self.depth:
            raise ParameterError(f"L={self.L} exceeds depth={self.depth}")
        for l in range(1, self.depth + 1):
            free = self.tokens_entering(l) - 1
            if 2 * self.r > free:
                raise ParameterError(f"r={self.r} needs 2r <= {free} free tokens at block {l}")

    def tokens_entering(self, l):
        """Token count entering block l (1-based): merging happens inside each block."""
        return self.N + 1 - (l - 1) * self.r

    @property
    def R(self):
        return self.N + 1 - self.L * self.r

    @classmethod
    def from_config(cls, cfg, K):
        return cls(N=cfg.N, d=cfg.d, depth=cfg.depth, heads=cfg.n_heads, r=cfg.r, L=cfg.L,
                   T=cfg.frames_per_clip, M=cfg.M, K=K, mlp_ratio=cfg.mlp_ratio,
                   kernel_size=cfg.kernel_size)

    def with_r(self, r):
        return replace(self, r=r)


VIT_B16_8F = dict(N=196, d=768, depth=12, heads=12, L=11, T=8, M=4, K=100, mlp_ratio=4)


@dataclass
class FlopReport:
    geometry: dict
    per_block: list = field(default_factory=list)     # per-frame encoder blocks
    encoder_total: int = 0
    adapter_total: int = 0
    alignment_total: int = 0

    @property
    def grand_total(self):
        return self.encoder_total + self.adapter_total + self.alignment_total

    @property
    def per_clip(self):
        return self.grand_total

    @property
    def per_frame(self):
        return self.grand_total / self.geometry["T"]

    def __add__(self, other):
        return FlopReport(self.geometry, self.per_block + other.per_block,
                          self.encoder_total + other.encoder_total,
                          self.adapter_total + other.adapter_total,
                          self.alignment_total + other.alignment_total)

    def to_dict(self):
        return {"geometry": self.geometry, "per_block": self.per_block,
                "encoder_total": self.encoder_total, "adapter_total": self.adapter_total,
                "alignment_total": self.alignment_total, "grand_total": self.grand_total,
                "per_frame": self.per_frame, "per_clip": self.per_clip}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self):
        rows = [("block", "tokens", "attention", "mlp", "matcher", "total")]
        for b in self.per_block:
            rows.append(tuple(str(b[k]) for k in ("block", "tokens", "attention", "mlp", "matcher", "total")))
        lines = format_table(rows)
        lines.append("")
        for key in ("encoder_total", "adapter_total", "alignment_total", "grand_total"):
            lines.append(f"{key:<16} {getattr(self, key):>16}")
        return "\n".join(lines)


def format_table(rows):
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(rows[0]))]
    return ["  ".join(str(c).rjust(w) for c, w in zip(row, widths)) for row in rows]


def block_flops(n, d, mlp_ratio, r):
    """(attention, mlp, matcher) for one block that ``n`` tokens enter.

    Merging sits between attention and the MLP, so the MLP sees n - r tokens.
    """
    attention = 4 * n * d * d + 2 * n * n * d
    mlp = 2 * (n - r) * d * d * mlp_ratio
    matcher = (n * n * d) // 2 if r > 0 else 0
    return attention, mlp, matcher


def count_encoder_flops(g):
    """Per-block counts for one frame; the total covers all T frames."""
    blocks = []
    for l in range(1, g.depth + 1):
        n = g.tokens_entering(l)
        att, mlp, match = block_flops(n, g.d, g.mlp_ratio, g.r)
        blocks.append({"block": l, "tokens": n, "attention": att, "mlp": mlp,
                       "matcher": match, "total": att + mlp + match})
    total = g.T * sum(b["total"] for b in blocks)
    return FlopReport(asdict(g), blocks, encoder_total=total)


def adapter_parts(g):
    """Named adapter counts for one clip."""
    d, T = g.d, g.T
    attn = 4 * T * d * d + 2 * T * T * d
    return {
        "query": T * 2 * d * d,                 # MLP_q on the pooled aligned features
        "keyvalue": T * 2 * d * d,              # MLP_kv on the pooled tokens
        "self_attention": g.M * attn,
        "cross_attention": g.M * attn,
        "conv": g.M * T * g.kernel_size * d * d,
        "out": 2 * d * d,                       # MLP_out on the pooled queries
    }


def count_adapter_flops(g):
    """Adapter counts plus the per-frame R x K x d alignment cost."""
    parts = adapter_parts(g)
    return FlopReport(asdict(g), [], adapter_total=sum(parts.values()),
                      alignment_total=g.T * g.R * g.K * g.d)


def count_flops(g):
    return count_encoder_flops(g) + count_adapter_flops(g)


def r_sweep(g, r_values, accuracy=None):
    """One row per distinct r (first occurrence order) with totals and ratio to the first row."""
    seen, rows = set(), []
    for r in r_values:
        if r in seen:
            continue
        seen.add(r)
        rep = count_flops(g.with_r(r))
        row = {"r": r, "encoder_total": rep.encoder_total, "total": rep.grand_total}
        if accuracy is not None and r in accuracy:
            row["accuracy"] = accuracy[r]
        rows.append(row)
    base = rows[0]["total"] if rows else 1
    for row in rows:
        row["ratio"] = row["total"] / base
    return rows


def sweep_to_text(rows):
    header = ["r", "total", "ratio"] + (["accuracy"] if any("accuracy" in r for r in rows) else [])
    table = [tuple(header)]
    for row in rows:
        cells = [str(row["r"]), str(row["total"]), f"{row['ratio']:.4f}"]
        if "accuracy" in header:
            cells.append(f"{row['accuracy']:.4f}" if "accuracy" in row else "-")
        table.append(tuple(cells))
    return "\n".join(format_table(table))


def wallclock_bench(model, frames, S=None, repetitions=5, warmup=1):
    """Seconds per clip for noise-free video_representation over ``frames`` (n, T, H, W, C).

    Warmup passes are discarded; returns mean and sd over ``repetitions``.
    """
    from . import tensor as Tn

    if repetitions < 3:
        raise ParameterError(f"repetitions must be >= 3, got {repetitions}")
    frames = np.asarray(frames)
    if frames.ndim != 5 or len(frames) == 0:
        raise ParameterError("need a non-empty (n, T, H, W, C) batch of clips")
    frames = frames.astype(model.cfg.dtype, copy=False)

    def run():
        with Tn.no_grad():
            model(frames, S, None)

    for _ in range(warmup):
        run()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) / len(frames))
    return {"mean": statistics.fmean(times), "sd": statistics.stdev(times),
            "repetitions": repetitions, "clips": len(frames), "times": times}
