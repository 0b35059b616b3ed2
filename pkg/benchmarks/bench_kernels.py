#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs every kernel on representative problem sizes and prints a table of
per-call times plus the speedup of the active numba path. The numba side is
warmed before timing so JIT compilation stays out of the numbers.

Usage:
    python benchmarks/bench_kernels.py [--repeat 20]

Setting LSHPIPE_NUMBA=0 flips the package to the numpy path at import time;
this script always times both paths explicitly via kernels.IMPLEMENTATIONS.
"""

import argparse
import time

import numpy as np

from lshpipe import kernels


def time_call(fn, *args, repeat: int) -> float:
    fn(*args)  # warm (JIT compile / cache load)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def build_cases(rng):
    n, d, funcs = 20_000, 128, 96
    vectors = rng.normal(0, 50, size=(n, d)).astype(np.float32)
    a = rng.normal(0, 1, size=(funcs, d))
    b = rng.uniform(0, 100.0, size=funcs)
    slots = rng.integers(-500, 500, size=(n, 16)).astype(np.int64)
    q = vectors[0]
    queries = vectors[:64]
    rows = np.arange(n, dtype=np.int64)
    ids = rows.copy()
    morton_slots = rng.integers(0, 16, size=(n, 16)).astype(np.int64)
    codes = kernels.IMPLEMENTATIONS["numpy"]["morton_interleave"](morton_slots, 4)
    return [
        ("project (20k x 96 x 128d)", "project", (vectors, a, b, 100.0)),
        ("bucket_hashes (20k x M=16)", "bucket_hashes", (slots, 0, kernels.ROUTE_SEED)),
        ("sq_dists (20k x 128d)", "sq_dists", (q, vectors)),
        ("pairwise (64 x 20k x 128d)", "pairwise_sq_dists", (queries, vectors)),
        ("local_topk (20k cands, k=10)", "local_topk", (vectors, rows, ids, q, 10)),
        ("morton_interleave (20k x 16)", "morton_interleave", (morton_slots, 4)),
        ("morton_deinterleave (20k)", "morton_deinterleave", (codes, 16, 4)),
    ]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()

    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    cases = build_cases(rng)
    print(f"active path: {kernels.ACTIVE}; repeat={args.repeat}")
    header = f"{'kernel':32s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))
    for label, name, call_args in cases:
        t_np = time_call(kernels.IMPLEMENTATIONS["numpy"][name], *call_args, repeat=args.repeat)
        t_nb = time_call(kernels.IMPLEMENTATIONS["numba"][name], *call_args, repeat=args.repeat)
        print(f"{label:32s} {t_np * 1e3:10.3f}ms {t_nb * 1e3:10.3f}ms {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
