"""Select the compiled kernels when available, otherwise the numpy fallback.

Set ``KBAND_PURE_PYTHON=1`` before import to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if os.environ.get("KBAND_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        BACKEND = "cython"


def _as(arr, dtype):
    return np.ascontiguousarray(arr, dtype=dtype)


def conv3x3_forward(x, w, b):
    dt = x.dtype
    return kernels.conv3x3_forward(_as(x, dt), _as(w, dt), _as(b, dt))


def conv3x3_backward(x, w, g):
    dt = x.dtype
    return kernels.conv3x3_backward(_as(x, dt), _as(w, dt), _as(g, dt))


def poisson_disc_2d(radius, order, initial):
    return kernels.poisson_disc_2d(_as(radius, np.float64), _as(order, np.int64), _as(initial, np.uint8))


def poisson_disc_1d(radius, order, initial):
    return kernels.poisson_disc_1d(_as(radius, np.float64), _as(order, np.int64), _as(initial, np.uint8))
