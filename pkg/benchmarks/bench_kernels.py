"""Timing comparison between the compiled kernels and the numpy fallback.

Run with: python3 benchmarks/bench_kernels.py

The quantile Huber shape below mirrors one training update (batch 32,
100 atoms against 100 target atoms); the distance shape mirrors one
bootstrap replicate of the gap estimator (512-level representations).
"""

import time

import numpy as np

from ctdrl._kernels import _fallback

try:
    from ctdrl._kernels import _native
except ImportError:
    _native = None


def bench(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    rng = np.random.default_rng(0)
    cases = [
        (
            "quantile_huber batch=32 m=100 mp=100",
            "quantile_huber_batch",
            (
                np.ascontiguousarray(rng.normal(size=(32, 100))),
                np.ascontiguousarray(rng.normal(size=(32, 100))),
                1.0,
            ),
            200,
        ),
        (
            "quantile_huber batch=1 m=512 mp=512",
            "quantile_huber_batch",
            (
                np.ascontiguousarray(rng.normal(size=(1, 512))),
                np.ascontiguousarray(rng.normal(size=(1, 512))),
                1.0,
            ),
            100,
        ),
        (
            "wasserstein_sorted m=512 p=1",
            "wasserstein_sorted",
            (np.sort(rng.normal(size=512)), np.sort(rng.normal(size=512)), 1),
            2000,
        ),
        (
            "wasserstein_sorted m=512 p=2",
            "wasserstein_sorted",
            (np.sort(rng.normal(size=512)), np.sort(rng.normal(size=512)), 2),
            2000,
        ),
    ]
    header = f"{'case':42s} {'numpy':>12s} {'native':>12s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for label, fn_name, args, repeats in cases:
        t_py = bench(getattr(_fallback, fn_name), args, repeats)
        if _native is None:
            print(f"{label:42s} {t_py * 1e6:>10.1f}us {'missing':>12s} {'-':>8s}")
            continue
        t_nat = bench(getattr(_native, fn_name), args, repeats)
        print(
            f"{label:42s} {t_py * 1e6:>10.1f}us {t_nat * 1e6:>10.1f}us "
            f"{t_py / t_nat:>7.1f}x"
        )
    if _native is None:
        print("\ncompiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
