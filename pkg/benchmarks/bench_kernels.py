"""Compiled vs pure-Python matmul kernels: bitwise agreement and throughput.

    python3 benchmarks/bench_kernels.py [--sizes 64 128 256] [--repeats 5]
"""

import argparse
import statistics
import time

import numpy as np

from predcode import _fallback

try:
    from predcode import _kernels
except ImportError:
    _kernels = None


def _median_seconds(fn, a, b, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(a, b)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; nothing to compare")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'op':<12}{'n':>6}{'compiled GF/s':>15}{'python GF/s':>13}{'speedup':>9}  bitwise")
    for n in args.sizes:
        a, b = rng.standard_normal((n, n)), rng.standard_normal((n, n))
        for op in ("matmul", "matmul_tn", "batch_outer"):
            fc, fp = getattr(_kernels, op), getattr(_fallback, op)
            bt = b.T.copy() if op == "batch_outer" else b
            same = np.array_equal(fc(a, bt), fp(a, bt))
            tc = _median_seconds(fc, a, bt, args.repeats)
            tp = _median_seconds(fp, a, bt, args.repeats)
            flops = 2.0 * n ** 3
            print(f"{op:<12}{n:>6}{flops / tc / 1e9:>15.2f}{flops / tp / 1e9:>13.2f}{tp / tc:>9.1f}  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
