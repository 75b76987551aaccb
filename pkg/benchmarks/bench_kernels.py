#!/usr/bin/env python3
"""Throughput comparison of the jit kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeats 5]

The same comparison can be forced package-wide at runtime by setting
POPFUSION_DISABLE_NUMBA=1 (the fallback path becomes the default).
"""

import argparse
import time

import numpy as np

from popfusion import kernels


def bench(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not kernels._HAVE_NUMBA:
        print("numba is not installed; only the numpy path exists")
        return

    kernels.warmup()  # compile outside the timed region
    rng = np.random.default_rng(0)
    rows = []

    for n_roi, t in ((116, 150), (200, 300)):
        ts = rng.normal(size=(n_roi, t))
        rows.append((f"pearson_upper {n_roi}x{t}",
                     bench(kernels.pearson_upper_numpy, ts, repeats=args.repeats),
                     bench(kernels._pearson_upper_numba,
                           np.ascontiguousarray(ts), repeats=args.repeats)))

    for n, d in ((200, 128), (871, 1000)):
        x = rng.normal(size=(n, d))
        rows.append((f"correlation_distance {n}x{d}",
                     bench(kernels.correlation_distance_numpy, x,
                           repeats=args.repeats),
                     bench(kernels._correlation_distance_numba,
                           np.ascontiguousarray(x), repeats=args.repeats)))

    for n, v in ((200, 3), (871, 3)):
        values = np.column_stack([rng.integers(0, 3, n).astype(float),
                                  rng.integers(0, 2, n).astype(float),
                                  rng.uniform(5, 60, n)])
        tol = np.array([0.0, 0.0, 2.0])
        labels = rng.integers(0, 2, n)
        is_test = rng.random(n) < 0.1
        rows.append((f"match_tables {n}x{v}",
                     bench(kernels.match_tables_numpy, values, tol, labels,
                           is_test, repeats=args.repeats),
                     bench(kernels._match_tables_numba, values, tol,
                           labels.astype(np.int64), is_test,
                           repeats=args.repeats)))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e3:>8.2f}ms  {t_nb * 1e3:>8.2f}ms  "
              f"{t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
