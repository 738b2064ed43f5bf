import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from alignadapt import tensor as T
from alignadapt.adapter import ALTModel
from alignadapt.encoder import EncoderBlockState, RegionEncoder
from alignadapt.errors import ParameterError
from alignadapt.flops import (VIT_B16_8F, ModelGeometry, adapter_parts, block_flops,
                              count_adapter_flops, count_encoder_flops, count_flops, r_sweep,
                              sweep_to_text, wallclock_bench)

from conftest import tiny_config


def traced_block_macs(grid, d, heads, depth, r, mlp_ratio=4, B=2):
    """Multiply-adds of every matmul issued inside each encoder block, per frame."""
    rng = np.random.default_rng(0)
    enc = RegionEncoder(grid * 2, 2, 1, d, depth, heads, mlp_ratio, r, rng, np.float64)
    frames = rng.uniform(size=(B, grid * 2, grid * 2, 1))
    log = []
    real = T.matmul

    def counting(a, b):
        out = real(a, b)
        a_shape = np.shape(a.data if isinstance(a, T.Tensor) else a)
        b_shape = np.shape(b.data if isinstance(b, T.Tensor) else b)
        log.append(int(np.prod(out.shape)) * a_shape[-1])
        return out

    per_block, tokens = [], []
    with T.no_grad():
        seq = enc.patch_embed(frames)
        state = EncoderBlockState(seq.tokens, np.ones((B, enc.N + 1)),
                                  np.tile(np.arange(enc.N + 1), (B, 1)))
        T.matmul = counting
        try:
            for block in enc.blocks:
                log.clear()
                tokens.append(state.n)
                state = block(state, r)
                per_block.append(sum(log) // B)
        finally:
            T.matmul = real
    return tokens, per_block


@pytest.mark.parametrize("grid,d,heads,depth,r", [(4, 8, 2, 4, 2), (5, 12, 3, 3, 3), (3, 4, 1, 5, 1),
                                                   (4, 8, 2, 3, 0)])
def test_counter_matches_traced_matmuls(grid, d, heads, depth, r):
    tokens, traced = traced_block_macs(grid, d, heads, depth, r)
    g = ModelGeometry(N=grid * grid, d=d, depth=depth, heads=heads, r=r, L=depth - 1, T=1, M=0, K=1)
    rep = count_encoder_flops(g)
    for b, n, macs in zip(rep.per_block, tokens, traced):
        assert b["tokens"] == n
        assert b["attention"] + b["mlp"] == macs


def test_block_formula_by_hand():
    att, mlp, match = block_flops(10, 4, 4, 2)
    assert att == 4 * 10 * 16 + 2 * 100 * 4
    assert mlp == 2 * 8 * 16 * 4
    assert match == 100 * 4 // 2
    assert block_flops(10, 4, 4, 0) == (att, 2 * 10 * 16 * 4, 0)


def test_totals_add_up():
    g = ModelGeometry()
    rep = count_flops(g)
    assert rep.encoder_total == g.T * sum(b["total"] for b in rep.per_block)
    assert rep.adapter_total == sum(adapter_parts(g).values())
    assert rep.alignment_total == g.T * g.R * g.K * g.d
    assert rep.grand_total == rep.encoder_total + rep.adapter_total + rep.alignment_total
    assert rep.per_frame * g.T == rep.per_clip
    back = json.loads(rep.to_json())
    assert back["grand_total"] == rep.grand_total
    assert "grand_total" in rep.to_text()


def test_adapter_terms_scale_with_m():
    g0, g2 = ModelGeometry(M=0), ModelGeometry(M=2)
    a0, a2 = count_adapter_flops(g0).adapter_total, count_adapter_flops(g2).adapter_total
    d, Tn = g2.d, g2.T
    per_block = 2 * (4 * Tn * d * d + 2 * Tn * Tn * d) + Tn * g2.kernel_size * d * d
    assert a2 - a0 == 2 * per_block


@given(st.integers(2, 8), st.integers(2, 6))
def test_monotone_in_r(grid, depth):
    N = grid * grid
    g = ModelGeometry(N=N, d=8, depth=depth, heads=1, r=0, L=depth - 1, T=2, M=1, K=3)
    valid = [r for r in range(0, N) if all(2 * r <= N - l * r for l in range(depth))]
    totals = [count_flops(g.with_r(r)).grand_total for r in valid]
    # the matcher costs something the first time merging switches on; after that, strictly less
    assert all(a > b for a, b in zip(totals[1:], totals[2:]))


def test_small_sweep_strictly_decreasing():
    totals = [row["total"] for row in r_sweep(ModelGeometry(r=0), [0, 1, 2])]
    assert totals[0] > totals[1] > totals[2]


def test_encoder_linear_in_frames():
    one, four = ModelGeometry(T=1), ModelGeometry(T=4)
    assert count_encoder_flops(four).encoder_total == 4 * count_encoder_flops(one).encoder_total
    sa = lambda g: adapter_parts(g)["self_attention"]
    assert sa(ModelGeometry(T=8)) > 2 * sa(four)


def test_vit_b_ratio_and_sweep():
    g = ModelGeometry(r=0, **VIT_B16_8F)
    rows = r_sweep(g, [0, 4, 8, 13])
    ratios = [row["ratio"] for row in rows]
    assert ratios[0] == 1.0
    assert 0.70 <= ratios[2] <= 0.88
    assert all(a > b for a, b in zip([row["total"] for row in rows], [row["total"] for row in rows][1:]))


def test_sweep_dedups_and_reports_accuracy():
    rows = r_sweep(ModelGeometry(r=0), [0, 2, 0, 1, 2], accuracy={2: 0.5})
    assert [r["r"] for r in rows] == [0, 2, 1]
    assert rows[1]["accuracy"] == 0.5 and "accuracy" not in rows[0]
    text = sweep_to_text(rows)
    assert "accuracy" in text.splitlines()[0] and "-" in text


@pytest.mark.parametrize("bad", [dict(r=9), dict(d=0), dict(L=9), dict(M=-1), dict(r=-1)])
def test_bad_geometry(bad):
    with pytest.raises(ParameterError):
        ModelGeometry(**bad)


def test_from_config_matches_model():
    cfg = tiny_config()
    g = ModelGeometry.from_config(cfg, K=7)
    assert (g.N, g.d, g.depth, g.r, g.L, g.T, g.R) == (16, 16, 3, 2, 2, 4, cfg.R)


def test_wallclock_requires_repetitions():
    cfg = tiny_config()
    model = ALTModel(cfg)
    frames = np.zeros((1, 4, 16, 16, 3), dtype=np.float32)
    with pytest.raises(ParameterError):
        wallclock_bench(model, frames, repetitions=1)
    with pytest.raises(ParameterError):
        wallclock_bench(model, frames[:0], repetitions=3)


def test_wallclock_merging_not_slower():
    # 257 tokens over five merge blocks: r=24 removes 120 of them. Smaller r
    # (8 removes ~6% of the token-blocks) is within timer noise on one core.
    rng = np.random.default_rng(0)
    frames = rng.uniform(size=(2, 2, 64, 64, 3)).astype(np.float32)
    times = {}
    for r in (0, 24):
        cfg = tiny_config(image_size=64, patch_size=4, d=32, depth=6, r=r, frames_per_clip=2,
                          query_mode="learnable")
        out = wallclock_bench(ALTModel(cfg), frames, repetitions=5)
        assert out["repetitions"] == 5 and len(out["times"]) == 5 and out["sd"] >= 0
        times[r] = min(out["times"])
    assert times[24] <= times[0]
