"""Time the numba and numpy convolution kernels against each other.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Numba compile time is excluded by a warm-up call. Each row also checks
that both backends return identical arrays.
"""
import argparse
import time

import numpy as np

from feddm import _kernels

SHAPES = [(64, 1, 28, 28), (64, 8, 14, 14), (32, 3, 32, 32), (32, 16, 16, 16)]


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare (pip install numba)")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<8} {'shape':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'equal':>6}")
    for shape in SHAPES:
        x = rng.standard_normal(shape)
        cols = _kernels.im2col_numpy(x, 3, 3, 1)
        pairs = [
            ("im2col", lambda: _kernels.im2col_numpy(x, 3, 3, 1), lambda: _kernels.im2col_numba(x, 3, 3, 1)),
            ("col2im", lambda: _kernels.col2im_numpy(cols, shape, 3, 3, 1),
             lambda: _kernels.col2im_numba(cols, shape, 3, 3, 1)),
        ]
        for name, f_np, f_nb in pairs:
            t_np, t_nb = best_of(f_np, args.repeats), best_of(f_nb, args.repeats)
            same = np.array_equal(f_np(), f_nb())
            print(f"{name:<8} {str(shape):<18} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} "
                  f"{t_np / t_nb:>7.2f}x {str(same):>6}")


if __name__ == "__main__":
    main()
