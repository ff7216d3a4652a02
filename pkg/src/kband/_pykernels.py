"""Pure-Python/numpy twins of the compiled kernels in ``_ckernels.pyx``.

Used when the extension is not built or ``KBAND_PURE_PYTHON=1`` is set.
"""
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x):
    # (cin, h, w) -> (cin, h, w, 3, 3) view over the zero-padded input
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


def conv3x3_forward(x, w, b):
    out = np.einsum("ihwab,oiab->ohw", _windows(x), w, optimize=True)
    out += b[:, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv3x3_backward(x, w, g):
    gw = np.einsum("ohw,ihwab->oiab", g, _windows(x), optimize=True)
    gb = g.sum(axis=(1, 2))
    # input gradient is a full correlation with the flipped kernel
    wf = w[:, :, ::-1, ::-1]
    gx = np.einsum("ohwab,oiab->ihw", _windows(g), wf, optimize=True)
    return (np.ascontiguousarray(gx, dtype=x.dtype),
            np.ascontiguousarray(gw, dtype=x.dtype),
            np.ascontiguousarray(gb, dtype=x.dtype))


def poisson_disc_2d(radius, order, initial):
    """Accept candidates in ``order`` unless an accepted pixel lies closer than the candidate's radius."""
    h, wd = radius.shape
    out = np.array(initial, dtype=np.uint8, copy=True)
    acc = out.tolist()
    rad_list = radius.tolist()
    for idx in order.tolist():
        r, c = divmod(idx, wd)
        if acc[r][c]:
            continue
        rad = rad_list[r][c]
        rad2 = rad * rad
        reach = int(math.ceil(rad))
        blocked = False
        for rr in range(max(r - reach, 0), min(r + reach + 1, h)):
            dr2 = (rr - r) * (rr - r)
            row = acc[rr]
            for cc in range(max(c - reach, 0), min(c + reach + 1, wd)):
                if row[cc] and dr2 + (cc - c) * (cc - c) < rad2:
                    blocked = True
                    break
            if blocked:
                break
        if not blocked:
            acc[r][c] = 1
    return np.asarray(acc, dtype=np.uint8)


def poisson_disc_1d(radius, order, initial):
    n = radius.shape[0]
    acc = np.array(initial, dtype=np.uint8, copy=True).tolist()
    rad_list = radius.tolist()
    for c in order.tolist():
        if acc[c]:
            continue
        rad = rad_list[c]
        reach = int(math.ceil(rad))
        blocked = False
        for cc in range(max(c - reach, 0), min(c + reach + 1, n)):
            if acc[cc] and (cc - c) * (cc - c) < rad * rad:
                blocked = True
                break
        if not blocked:
            acc[c] = 1
    return np.asarray(acc, dtype=np.uint8)
