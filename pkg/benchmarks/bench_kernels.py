"""Time the numba and numpy convolution kernels on encoder-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both backends are imported from the same module regardless of EPISEG_NUMBA,
so one run compares them directly.  Prints the best-of-N wall time per shape
and the largest absolute disagreement between the two paths.
"""
import argparse
import time

import numpy as np

from episeg.numcore import kernels

# (batch, height, width, in channels, out channels): the default encoder's blocks
SHAPES = [
    (8, 64, 64, 1, 8),
    (8, 32, 32, 8, 16),
    (8, 16, 16, 16, 32),
    (16, 16, 16, 32, 32),
]


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    # compile outside the timed region
    x0, w0 = rng.normal(size=(1, 4, 4, 1)), rng.normal(size=(3, 3, 1, 1))
    kernels.conv2d_backward_numba(x0, w0, kernels.conv2d_forward_numba(x0, w0))

    print(f"{'shape':>24} {'pass':>5} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8} {'max |diff|':>11}")
    for B, H, W, ci, co in SHAPES:
        x = rng.normal(size=(B, H, W, ci))
        w = rng.normal(size=(3, 3, ci, co))
        g = rng.normal(size=(B, H, W, co))
        label = f"{B}x{H}x{W}x{ci}->{co}"
        for name, np_fn, nb_fn in (
            ("fwd", lambda: kernels.conv2d_forward_numpy(x, w), lambda: kernels.conv2d_forward_numba(x, w)),
            ("bwd", lambda: kernels.conv2d_backward_numpy(x, w, g), lambda: kernels.conv2d_backward_numba(x, w, g)),
        ):
            a, b = np_fn(), nb_fn()
            a, b = (a,) if isinstance(a, np.ndarray) else a, (b,) if isinstance(b, np.ndarray) else b
            diff = max(float(np.abs(p - q).max()) for p, q in zip(a, b))
            t_np, t_nb = best_time(np_fn, args.repeat), best_time(nb_fn, args.repeat)
            print(f"{label:>24} {name:>5} {t_np * 1e3:9.2f} {t_nb * 1e3:9.2f} {t_np / t_nb:7.2f}x {diff:11.2e}")


if __name__ == "__main__":
    main()
