"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best wall time of each backend and the
speedup. The fallback is benchmarked in-process by calling ``_pykernels``
directly; no environment variable is needed.
"""
import argparse
import timeit

import numpy as np

from kband import _pykernels

try:
    from kband import _ckernels
except ImportError:
    _ckernels = None


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 64, 64))
    w = rng.normal(size=(8, 8, 3, 3))
    b = rng.normal(size=8)
    g = rng.normal(size=(8, 64, 64))
    radius = 0.5 + 3.0 * rng.random((64, 64))
    order = rng.permutation(64 * 64).astype(np.int64)
    init = np.zeros((64, 64), np.uint8)
    init[28:36, 28:36] = 1
    r1 = 0.5 + 3.0 * rng.random(256)
    o1 = rng.permutation(256).astype(np.int64)
    i1 = np.zeros(256, np.uint8)
    return {
        "conv3x3_forward 8x8ch 64x64": ("conv3x3_forward", (x, w, b)),
        "conv3x3_backward 8x8ch 64x64": ("conv3x3_backward", (x, w, g)),
        "poisson_disc_2d 64x64": ("poisson_disc_2d", (radius, order, init)),
        "poisson_disc_1d 256 cols": ("poisson_disc_1d", (r1, o1, i1)),
    }


def best(fn, args, repeat):
    number = 3
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, (fn, a) in cases().items():
        tp = best(getattr(_pykernels, fn), a, args.repeat)
        if _ckernels is None:
            print(f"{name:32s} {tp * 1e3:10.3f} {'n/a':>10s} {'':>8s}")
            continue
        tc = best(getattr(_ckernels, fn), a, args.repeat)
        print(f"{name:32s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
