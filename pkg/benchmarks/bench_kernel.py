"""Benchmark the compiled trial kernel against the pure-numpy fallback.

Both kernels produce bit-identical output (checked here on a sample
before timing), so the only difference is speed.  Run:

    python benchmarks/bench_kernel.py [--trials N] [--n DIM] [--m PATCHES]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from poca.theory.kernel import available_kernels, mask64


def run_once(fn, trials: int, n: int, m: int, chunk: int = 4096) -> float:
    start = time.perf_counter()
    for t0 in range(0, trials, chunk):
        fn(
            mask64(12345),
            t0,
            min(chunk, trials - t0),
            n,
            m,
            0,  # parabolic
            1.0,
            2,  # seeded_random
            mask64(321),
            -1.0,
            np.array([]),
            0,
            0.0,
        )
    return time.perf_counter() - start


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=200_000)
    parser.add_argument("--n", type=int, default=32)
    parser.add_argument("--m", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    kernels = available_kernels()
    print(f"available kernels: {', '.join(sorted(kernels))}")

    if len(kernels) > 1:
        sample_args = (
            mask64(7), 0, 256, args.n, args.m, 0, 1.0, 2, mask64(8),
            -1.0, np.array([]), 0, 0.0,
        )
        outs = {name: fn(*sample_args) for name, fn in kernels.items()}
        names = sorted(outs)
        for key in outs[names[0]]:
            assert np.array_equal(outs[names[0]][key], outs[names[1]][key]), key
        print("bit-identity check on 256 trials: OK")

    print(
        f"\ntiming {args.trials} trials (n={args.n}, m={args.m}), "
        f"best of {args.repeats}:\n"
    )
    print(f"{'kernel':<10} {'seconds':>9} {'trials/s':>12} {'speedup':>9}")
    times = {}
    for name in sorted(kernels):
        best = min(
            run_once(kernels[name], args.trials, args.n, args.m)
            for _ in range(args.repeats)
        )
        times[name] = best
    baseline = times.get("python", max(times.values()))
    for name in sorted(times):
        rate = args.trials / times[name]
        print(
            f"{name:<10} {times[name]:>9.3f} {rate:>12,.0f} "
            f"{baseline / times[name]:>8.1f}x"
        )


if __name__ == "__main__":
    main()
