"""Benchmark the compiled convolution kernels against the numpy fallback.

Times im2col/col2im directly and a full conv2d forward through the tensor
core, for a few layer shapes drawn from the MNIST models.  Run with::

    python benchmarks/bench_conv.py [--repeats 30]

The tensor core picks its backend at import, so the end-to-end row reflects
whichever backend `splinecnn.kernels.BACKEND` reports; the per-kernel rows
always time both implementations side by side.
"""

import argparse
import timeit

import numpy as np

from splinecnn import tensor as T
from splinecnn.kernels import BACKEND, fallback
from splinecnn.tensor import DTensor

try:
    from splinecnn.kernels import _convops
except ImportError:
    _convops = None

# (batch, height, width, channels, kernel, filters) per benchmark case
CASES = [
    ("conv1 LeNet-8", 250, 28, 28, 1, 5, 8),
    ("conv2 LeNet-8", 250, 14, 14, 8, 5, 16),
    ("conv1 Spline-LeNet-8 K=2", 250, 28, 28, 1, 5, 16),
    ("conv2 LeNet-32", 250, 14, 14, 32, 5, 64),
]


def _best_of(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def bench_kernels(case, repeats):
    name, n, h, w, c, k, f = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, h, w, c)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (2, 2), (2, 2), (0, 0)))
    rows = []
    impls = [("fallback", fallback.im2col, fallback.col2im)]
    if _convops is not None:
        impls.append(("compiled", _convops.im2col, _convops.col2im))
    cols_ref = None
    for label, im2col, col2im in impls:
        t_im = _best_of(lambda: im2col(xp, k, k, 1, h, w), repeats)
        cols = im2col(xp, k, k, 1, h, w)
        if cols_ref is None:
            cols_ref = cols
        else:
            assert np.array_equal(cols, cols_ref), f"{name}: backend outputs differ"
        t_col = _best_of(lambda: col2im(cols, xp.shape, 1), repeats)
        rows.append((label, t_im, t_col))
    return name, rows


def bench_end_to_end(case, repeats):
    name, n, h, w, c, k, f = case
    rng = np.random.default_rng(0)
    x = DTensor(rng.standard_normal((n, h, w, c)).astype(np.float32))
    filt = DTensor(rng.standard_normal((k, k, c, f)).astype(np.float32))
    return _best_of(lambda: T.conv2d(x, filt, padding="same"), repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20,
                        help="timing repeats; best-of is reported")
    args = parser.parse_args()

    print(f"active tensor-core backend: {BACKEND}")
    if _convops is None:
        print("compiled extension not importable; timing fallback only")
    header = f"{'case':<28} {'backend':<9} {'im2col ms':>10} {'col2im ms':>10}"
    print(header)
    print("-" * len(header))
    speedups = []
    for case in CASES:
        name, rows = bench_kernels(case, args.repeats)
        for label, t_im, t_col in rows:
            print(f"{name:<28} {label:<9} {t_im * 1e3:>10.2f} {t_col * 1e3:>10.2f}")
        if len(rows) == 2:
            speedups.append(rows[0][1] / rows[1][1])
        t = bench_end_to_end(case, args.repeats)
        print(f"{name:<28} {'conv2d':<9} {t * 1e3:>10.2f} {'-':>10}")
    if speedups:
        print(f"\nim2col compiled speedup: "
              f"{min(speedups):.2f}x - {max(speedups):.2f}x (best-of-{args.repeats})")


if __name__ == "__main__":
    main()
