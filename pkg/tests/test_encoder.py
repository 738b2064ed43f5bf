import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from alignadapt import tensor as T
from alignadapt.encoder import (EncoderBlockState, RegionEncoder, apply_merge,
                                bipartite_soft_match, expected_token_count, patchify,
                                token_similarity)
from alignadapt.errors import ContractError, ParameterError, ShapeError
from alignadapt.tensor import Tensor


def state_of(x):
    x = np.asarray(x, dtype=np.float64)
    B, n, _ = x.shape
    return EncoderBlockState(Tensor(x), np.ones((B, n)), np.tile(np.arange(n), (B, 1)))


def valid_geometries():
    @st.composite
    def geom(draw):
        grid = draw(st.integers(1, 6))
        N = grid * grid
        depth = draw(st.integers(2, 5))
        L = depth - 1
        # largest r with 2r <= N - (l-1)r for every merge block and R >= 2
        r_max = max(r for r in range(0, N + 1)
                    if all(2 * r <= N - l * r for l in range(L)) and N + 1 - L * r >= 2)
        r = draw(st.integers(0, r_max))
        return grid, depth, r
    return geom()


@settings(max_examples=200)
@given(valid_geometries(), st.integers(0, 2 ** 31))
def test_token_count_law(geom, seed):
    grid, depth, r = geom
    patch = 2
    rng = np.random.default_rng(seed)
    enc = RegionEncoder(grid * patch, patch, 1, 4, depth, 1, 1, r, rng, np.float64)
    frames = rng.uniform(size=(2, grid * patch, grid * patch, 1))
    with T.no_grad():
        seq = enc.patch_embed(frames)
        state = EncoderBlockState(seq.tokens, np.ones((2, enc.N + 1)),
                                  np.tile(np.arange(enc.N + 1), (2, 1)))
        for l, block in enumerate(enc.blocks, start=1):
            state = block(state, r)
            assert state.n == expected_token_count(enc.N, r, l) == enc.N + 1 - l * r
            # sizes always account for every original token
            assert np.all(state.sizes.sum(axis=1) == enc.N + 1)
    out = enc(frames)
    assert out.R == enc.N + 1 - (depth - 1) * r


def exhaustive_plan(scores, a_idx, b_idx, r):
    """Best total similarity over every choice of r sources and their destinations.

    Ties: lowest sorted source tuple, then lowest destinations.
    """
    exact = [[Fraction(float(v)) for v in row] for row in scores]
    na, nb = len(a_idx), len(b_idx)
    best_key, best = None, None
    for srcs in itertools.combinations(range(na), r):
        for dsts in itertools.product(range(nb), repeat=r):
            total = sum(exact[s][d] for s, d in zip(srcs, dsts))
            key = (-total, srcs, dsts)
            if best_key is None or key < best_key:
                best_key, best = key, (srcs, dsts)
    srcs, dsts = best
    return {(int(a_idx[s]), int(b_idx[d])) for s, d in zip(srcs, dsts)}


@pytest.mark.parametrize("seed", range(100))
def test_bipartite_matching_equals_exhaustive_optimum(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 13))                # tokens including the class token
    r = int(rng.integers(1, (n - 1) // 2 + 1))
    d = 3
    if seed % 2:                                # coarse tokens: many exact ties
        x = rng.integers(-1, 2, size=(1, n, d)).astype(np.float64)
        x[np.all(x == 0, axis=-1)] = 1.0
    else:
        x = rng.standard_normal((1, n, d))
    state = state_of(x)
    plan = bipartite_soft_match(state, r)
    scores, a_idx, b_idx = token_similarity(x)
    got = {(s, t) for s, t, _ in plan.pairs(0)}
    assert got == exhaustive_plan(scores[0], a_idx, b_idx, r)


def test_token_similarity_is_cosine():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 7, 5))
    scores, a_idx, b_idx = token_similarity(x)
    assert list(a_idx) == [1, 3, 5] and list(b_idx) == [2, 4, 6]
    for b in range(2):
        for i, a in enumerate(a_idx):
            for j, c in enumerate(b_idx):
                cos = x[b, a] @ x[b, c] / np.linalg.norm(x[b, a]) / np.linalg.norm(x[b, c])
                assert scores[b, i, j] == pytest.approx(cos, abs=1e-12)


def test_merge_is_size_weighted_mean():
    x = np.array([[[9.0, 9.0], [1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0]]])
    state = state_of(x)
    state.sizes = np.array([[1.0, 3.0, 1.0, 1.0, 1.0]])
    plan = bipartite_soft_match(state, 1)
    assert plan.pairs(0)[0][:2] in [(1, 2), (3, 4)]
    merged = apply_merge(state, plan)
    assert merged.n == 4
    s, t = plan.pairs(0)[0][:2]
    row = merged.owner[0, t]
    expected = (x[0, s] * state.sizes[0, s] + x[0, t] * state.sizes[0, t]) / (state.sizes[0, s] + state.sizes[0, t])
    np.testing.assert_allclose(merged.tokens.data[0, row], expected)
    assert merged.sizes[0, row] == state.sizes[0, s] + state.sizes[0, t]
    assert merged.owner[0, s] == merged.owner[0, t]


def test_merge_plan_never_touches_class_token():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 9, 4))
    x[:, 0] = x[:, 1]                         # class token identical to a patch
    plan = bipartite_soft_match(state_of(x), 4)
    assert np.all(plan.src > 0) and np.all(plan.dst > 0)
    assert np.all(plan.src % 2 == 1) and np.all(plan.dst % 2 == 0)


def test_r_zero_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 5, 3))
    state = state_of(x)
    merged = apply_merge(state, bipartite_soft_match(state, 0))
    np.testing.assert_array_equal(merged.tokens.data, x)


def test_r_too_large_rejected():
    with pytest.raises(ParameterError):
        bipartite_soft_match(state_of(np.ones((1, 5, 2))), 3)


def test_stale_plan_rejected():
    rng = np.random.default_rng(0)
    a = state_of(rng.standard_normal((1, 9, 3)))
    plan = bipartite_soft_match(a, 2)
    b = state_of(rng.standard_normal((1, 7, 3)))
    with pytest.raises(ContractError):
        apply_merge(b, plan)


def test_patchify_row_major():
    frame = np.arange(4 * 4).reshape(1, 4, 4, 1).astype(float)
    p = patchify(frame, 2)
    assert p.shape == (1, 4, 4)
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 2], [8, 9, 12, 13])
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 5, 4, 1)), 2)


def test_region_map_partitions_patches():
    rng = np.random.default_rng(0)
    enc = RegionEncoder(16, 4, 3, 8, 4, 1, 2, 2, rng, np.float64)
    out = enc(rng.uniform(size=(3, 16, 16, 3)))
    assert out.R == 16 + 1 - 3 * 2
    for b in range(3):
        rows = out.region_map(b)
        assert rows[0] == []
        flat = sorted(p for row in rows for p in row)
        assert flat == list(range(1, 17))
        assert all(rows[i] for i in range(1, out.R))
    assert out.e_cls.shape == (3, 8) and out.regions.shape == (3, out.R - 1, 8)


def test_encoder_rejects_bad_geometry():
    rng = np.random.default_rng(0)
    with pytest.raises(ParameterError):
        RegionEncoder(16, 4, 3, 8, 4, 1, 2, 6, rng)
    with pytest.raises(ParameterError):
        RegionEncoder(16, 4, 3, 8, 1, 1, 2, 0, rng)
    with pytest.raises(ShapeError):
        RegionEncoder(15, 4, 3, 8, 3, 1, 2, 1, rng)


def test_instantiates_only_merge_blocks():
    enc = RegionEncoder(16, 4, 3, 8, 5, 1, 2, 1, np.random.default_rng(0))
    assert len(enc.blocks) == 4 and enc.L == 4
