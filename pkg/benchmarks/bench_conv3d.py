"""Benchmark the two conv3d backends: numba kernels vs the pure-numpy fallback.

Run with:  python3 benchmarks/bench_conv3d.py
"""

import time

import numpy as np

from protoseg import _conv_numba, _conv_numpy

SHAPES = [
    # (cin, cout, dims) matching the encoder's three layers on a 32x32x16 volume
    (1, 8, (32, 32, 16)),
    (8, 16, (32, 32, 16)),
    (16, 16, (32, 32, 16)),
]
REPS = 10


def timeit(fn, reps=REPS):
    fn()  # warmup (includes numba compilation on first call)
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    rng = np.random.default_rng(0)
    print(f"{'layer':<22}{'direction':<10}{'numpy (ms)':>12}{'numba (ms)':>12}"
          f"{'speedup':>10}")
    for cin, cout, dims in SHAPES:
        x = rng.normal(size=(cin, *dims))
        k = rng.normal(size=(cout, cin, 3, 3, 3))
        b = rng.normal(size=cout)
        gy = rng.normal(size=(cout, *dims))

        y_np = _conv_numpy.conv3d_forward(x, k, b)
        y_nb = _conv_numba.conv3d_forward(x, k, b)
        assert np.allclose(y_np, y_nb, atol=1e-10), "backends disagree"

        label = f"{cin}->{cout} {dims}"
        t_np = timeit(lambda: _conv_numpy.conv3d_forward(x, k, b))
        t_nb = timeit(lambda: _conv_numba.conv3d_forward(x, k, b))
        print(f"{label:<22}{'forward':<10}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}"
              f"{t_np / t_nb:>9.2f}x")

        t_np = timeit(lambda: _conv_numpy.conv3d_backward(x, k, gy))
        t_nb = timeit(lambda: _conv_numba.conv3d_backward(x, k, gy))
        print(f"{label:<22}{'backward':<10}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}"
              f"{t_np / t_nb:>9.2f}x")


if __name__ == "__main__":
    main()
