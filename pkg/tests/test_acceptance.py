"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``ACCEPTANCE`` and printed again in the terminal
summary (see conftest.py), so ``pytest -v`` output ends with the full table.
Criteria 6, 7, 9 and 10 train on the default synthetic dataset and take most
of the suite's runtime.
"""
import json
import math
import time

import numpy as np
import pytest

from alignadapt import tensor as T
from alignadapt.alignment import similarity_matrix, straight_through_assign
from alignadapt.config import TrainConfig
from alignadapt.encoder import EncoderBlockState, RegionEncoder, bipartite_soft_match, token_similarity
from alignadapt.flops import VIT_B16_8F, ModelGeometry, r_sweep
from alignadapt.gradcheck import grad_check
from alignadapt.synthetic import DatasetSpec, alignment_precision, in_memory_dataset
from alignadapt.tensor import Tensor
from alignadapt.training import (alignment_dump, ablation_run, evaluate, load_checkpoint,
                                 save_checkpoint, train)

from gradcases import COORD_CAP, OP_CASES, end_to_end
from test_alignment import st_gradient_gap
from test_encoder import exhaustive_plan, state_of

ACCEPTANCE = []

# Criterion 7 protocol: arms, seeds and epochs per run.
PARADIGM_SEEDS = range(5)
PARADIGM_EPOCHS = 300


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


@pytest.fixture(scope="module")
def dataset():
    return in_memory_dataset(DatasetSpec())


@pytest.fixture(scope="module")
def default_run(dataset):
    start = time.perf_counter()
    result = train(TrainConfig(), dataset)
    return result, time.perf_counter() - start


# -- 1 ----------------------------------------------------------------------
def test_c1_gradient_fidelity():
    tol = {np.float64: 1e-6, np.float32: 1e-4}
    start = time.perf_counter()
    worst = {np.float64: 0.0, np.float32: 0.0}
    failures = []
    for dtype in (np.float64, np.float32):
        for name in sorted(OP_CASES):
            for seed in range(10):
                f, params = OP_CASES[name](np.random.default_rng(seed), dtype)
                rep = grad_check(f, params, eps=1e-6, tolerance=tol[dtype],
                                 max_coords=COORD_CAP.get(name), seed=seed)
                worst[dtype] = max(worst[dtype], rep.worst)
                if not rep.passed:
                    failures.append(f"{name}/{dtype.__name__}/seed{seed}")
        for seed in range(10):
            f, params = end_to_end(np.random.default_rng(seed), dtype)
            rep = grad_check(f, params, eps=1e-6, tolerance=tol[dtype], max_coords=2, seed=seed)
            worst[dtype] = max(worst[dtype], rep.worst)
            if not rep.passed:
                failures.append(f"end_to_end/{dtype.__name__}/seed{seed}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    detail = (f"{len(OP_CASES)} ops + end-to-end loss, 10 seeds x 2 precisions; worst rel err "
              f"f64 {worst[np.float64]:.1e} (< 1e-6), f32 {worst[np.float32]:.1e} (< 1e-4); "
              f"{elapsed:.0f}s (< 120s)" + (f"; failed {failures[:5]}" if failures else ""))
    assert report(1, "gradient fidelity", ok, detail)


# -- 2 ----------------------------------------------------------------------
def test_c2_token_count_law():
    rng = np.random.default_rng(2)
    checked = 0
    bad = []
    for _ in range(200):
        grid = int(rng.integers(1, 7))
        N = grid * grid
        depth = int(rng.integers(2, 6))
        r_max = max(r for r in range(N + 1)
                    if all(2 * r <= N - l * r for l in range(depth - 1)) and N + 1 - (depth - 1) * r >= 2)
        r = int(rng.integers(0, r_max + 1))
        enc = RegionEncoder(grid * 2, 2, 1, 4, depth, 1, 1, r, rng, np.float64)
        frames = rng.uniform(size=(2, grid * 2, grid * 2, 1))
        with T.no_grad():
            state = EncoderBlockState(enc.patch_embed(frames).tokens, np.ones((2, N + 1)),
                                      np.tile(np.arange(N + 1), (2, 1)))
            for l, block in enumerate(enc.blocks, start=1):
                state = block(state, r)
                if state.n != N + 1 - l * r:
                    bad.append((grid, depth, r, l, state.n))
        checked += 1
    ok = checked >= 200 and not bad
    assert report(2, "token-count law", ok,
                  f"{checked} random geometries, count == N+1-l*r after every block"
                  + (f"; mismatches {bad[:3]}" if bad else ""))


# -- 3 ----------------------------------------------------------------------
def test_c3_merge_oracle():
    mismatched = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 13))
        r = int(rng.integers(1, (n - 1) // 2 + 1))
        if seed % 2:
            x = rng.integers(-1, 2, size=(1, n, 3)).astype(np.float64)
            x[np.all(x == 0, axis=-1)] = 1.0
        else:
            x = rng.standard_normal((1, n, 3))
        plan = bipartite_soft_match(state_of(x), r)
        scores, a_idx, b_idx = token_similarity(x)
        if {(s, t) for s, t, _ in plan.pairs(0)} != exhaustive_plan(scores[0], a_idx, b_idx, r):
            mismatched.append(seed)
    ok = not mismatched
    assert report(3, "merge-oracle equivalence", ok,
                  f"100 seeds, <= 12 tokens, half with exact ties; {100 - len(mismatched)}/100 "
                  "equal to the exhaustive optimum")


# -- 4 ----------------------------------------------------------------------
def test_c4_straight_through_identity():
    rng = np.random.default_rng(4)
    onehot_ok = True
    for _ in range(50):
        E, S = rng.standard_normal((7, 6)), rng.standard_normal((5, 6))
        A = similarity_matrix(Tensor(E), S, rng.gumbel(size=5))
        hat = straight_through_assign(A).data
        onehot_ok &= bool(np.all(np.isin(hat, (0.0, 1.0))) and np.all(hat.sum(1) == 1)
                          and np.array_equal(hat.argmax(1), A.data.argmax(1)))
    gaps = [st_gradient_gap(seed) for seed in range(10)]
    worst_numeric = max(g[0] for g in gaps)
    worst_analytic = max(g[1] for g in gaps)
    ok = onehot_ok and worst_numeric < 1e-8 and worst_analytic < 1e-8
    assert report(4, "straight-through identity", ok,
                  f"forward one-hot at argmax: {onehot_ok}; grad gap numeric {worst_numeric:.1e}, "
                  f"autodiff {worst_analytic:.1e} (< 1e-8, 10 seeds, float64)")


# -- 5 ----------------------------------------------------------------------
def test_c5_loss_sanity(dataset):
    worst = 0.0
    for I in (2, 3, 8, 50, 1000):
        for n in (1, 7):
            y = np.arange(n) % I
            loss = T.cross_entropy(Tensor(np.zeros((n, I))), y)
            worst = max(worst, abs(float(loss.data) - math.log(I)))
    cfg = TrainConfig(epochs=3, warmup_epochs=1)
    result = train(cfg, dataset)
    base = evaluate(result.model, dataset, result.text)
    same = True
    for tau in (1.0, 0.01, 5.0):
        result.model.cfg = cfg.replace(temperature=tau)
        m = evaluate(result.model, dataset, result.text)
        same &= (m["top1"], m["top5"], m["per_class"]) == (base["top1"], base["top5"], base["per_class"])
    result.model.cfg = cfg
    ok = worst < 1e-9 and same
    assert report(5, "loss sanity", ok,
                  f"|loss(uniform) - ln I| max {worst:.1e} (< 1e-9); evaluate unchanged under "
                  f"temperature 0.01/1/5: {same}")


# -- 6 ----------------------------------------------------------------------
def test_c6_learnability(default_run, dataset):
    result, elapsed = default_run
    train_top1 = result.history[-1]["train_top1"]
    test_top1 = evaluate(result.model, dataset, result.text)["top1"]
    ok = train_top1 >= 0.95 and test_top1 >= 0.80 and elapsed < 15 * 60
    assert report(6, "desk-scale learnability", ok,
                  f"train top-1 {train_top1:.3f} (>= 0.95), held-out seen top-1 {test_top1:.3f} "
                  f"(>= 0.80), {len(result.history)} epochs in {elapsed / 60:.1f} min (< 15)")


# -- 7 ----------------------------------------------------------------------
# Measured red: the full arm leads the learnable query by ~2 points, not 5. The
# two unseen classes differ in one entity that the encoder mis-aligns on unseen
# clips; kept failing rather than tuned (analysis in the decisions ledger).
@pytest.mark.xfail(strict=True, reason="zero-shot margin over the learnable query is below 5 points")
def test_c7_paradigm_trend(dataset):
    base = TrainConfig(epochs=PARADIGM_EPOCHS)
    rows = {row["variant"]: row for row in
            ablation_run(dataset, base, ["full", "learnable_query", "action_names"], PARADIGM_SEEDS)}
    full = rows["full"]["zero_shot_mean"]
    learnable = rows["learnable_query"]["zero_shot_mean"]
    names = rows["action_names"]["zero_shot_mean"]
    margin = full - learnable
    ok = margin >= 0.05 and full >= names
    per_seed = {k: [round(v, 3) for v in rows[k]["zero_shot_top1"]] for k in rows}
    assert report(7, "paradigm trend", ok,
                  f"zero-shot mean over {len(PARADIGM_SEEDS)} seeds: full {full:.3f}, learnable query "
                  f"{learnable:.3f} (margin {margin * 100:+.1f} pts, need >= +5), action names "
                  f"{names:.3f} (need <= full); per seed {json.dumps(per_seed)}")


# -- 8 ----------------------------------------------------------------------
def test_c8_flops_tradeoff():
    rows = r_sweep(ModelGeometry(r=0, **VIT_B16_8F), [0, 4, 8, 13])
    totals = [row["total"] for row in rows]
    ratio = rows[2]["ratio"]
    ok = 0.70 <= ratio <= 0.88 and all(a > b for a, b in zip(totals, totals[1:]))
    assert report(8, "FLOPs trade-off", ok,
                  f"ViT-B/16 8 frames: total(r=8)/total(r=0) = {ratio:.4f} (in [0.70, 0.88]); "
                  f"GMACs r=0,4,8,13: {', '.join(f'{t / 1e9:.0f}' for t in totals)}")


# -- 9 ----------------------------------------------------------------------
def test_c9_alignment_precision(default_run, dataset):
    result, _ = default_run
    trained = alignment_precision(alignment_dump(result.model, dataset, result.text), dataset)
    untrained_run = train(TrainConfig(epochs=0, warmup_epochs=0), dataset)
    untrained = alignment_precision(alignment_dump(untrained_run.model, dataset, untrained_run.text),
                                    dataset)
    K = len(result.text.corpus)
    ok = trained >= 0.70
    assert report(9, "alignment precision", ok,
                  f"after default training {trained:.3f} (>= 0.70); untrained {untrained:.3f}, "
                  f"1/K = {1 / K:.3f} (K = {K})")


# -- 10 ---------------------------------------------------------------------
def test_c10_determinism(dataset, tmp_path):
    cfg = TrainConfig(epochs=10, warmup_epochs=2)

    def run():
        result = train(cfg, dataset)
        return result, json.dumps(evaluate(result.model, dataset, result.text), sort_keys=True)

    first, a = run()
    _, b = run()
    save_checkpoint(first.checkpoint, tmp_path / "ckpt.altw")
    reloaded = load_checkpoint(tmp_path / "ckpt.altw")
    c = json.dumps(evaluate(reloaded, dataset), sort_keys=True)
    ok = a == b == c
    assert report(10, "determinism", ok,
                  f"rerun metrics JSON identical: {a == b}; checkpoint round trip identical: {a == c}")
