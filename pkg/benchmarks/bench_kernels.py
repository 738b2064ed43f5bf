"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--reps 20] [--json out.json]

Each case first checks that both backends agree, then reports the best of
``--reps`` timings per backend and the speedup.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from alignadapt import kernels


def cases(rng):
    B, n, d, r = 16, 197, 64, 8
    na = n // 2
    scores = rng.standard_normal((B, na, n - na))
    x = rng.standard_normal((B, n, d))
    w = rng.uniform(0.5, 2.0, (B, n))
    src, dst, _ = kernels.bipartite_match(scores, r, impl=kernels._kernels_py)
    slot = kernels.merge_slots(n, 2 * src + 1, 2 * dst, impl=kernels._kernels_py)
    g = rng.standard_normal((B, n - r, d))
    cx = rng.standard_normal((32, 8, d))
    W = rng.standard_normal((3, d, d))
    cg = rng.standard_normal((32, 8, d))
    return {
        "bipartite_match": lambda impl: kernels.bipartite_match(scores, r, impl=impl),
        "merge_slots": lambda impl: kernels.merge_slots(n, 2 * src + 1, 2 * dst, impl=impl),
        "merge_forward": lambda impl: kernels.merge_forward(x, w, slot, n - r, impl=impl),
        "merge_backward": lambda impl: kernels.merge_backward(g, w, slot, impl=impl),
        "conv1d_forward": lambda impl: kernels.conv1d_forward(cx, W, impl=impl),
        "conv1d_backward": lambda impl: kernels.conv1d_backward(cx, W, cg, impl=impl),
    }


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(u, v) for u, v in zip(a, b))
    if np.issubdtype(np.asarray(a).dtype, np.integer):
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--json", help="also write the rows here")
    args = ap.parse_args(argv)

    backends = kernels.available()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available", file=sys.stderr)
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        outs = {k: fn(impl) for k, impl in backends.items()}
        if "cython" in outs and not agree(outs["python"], outs["cython"]):
            raise SystemExit(f"{name}: backends disagree")
        row = {"kernel": name}
        for k, impl in backends.items():
            row[k] = min(timeit.repeat(lambda: fn(impl), number=5, repeat=args.reps)) / 5
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)

    print(f"{'kernel':<18}{'python (us)':>14}{'cython (us)':>14}{'speedup':>10}")
    for row in rows:
        cy = f"{row['cython'] * 1e6:14.1f}" if "cython" in row else f"{'-':>14}"
        sp = f"{row['speedup']:10.2f}" if "speedup" in row else f"{'-':>10}"
        print(f"{row['kernel']:<18}{row['python'] * 1e6:14.1f}{cy}{sp}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
