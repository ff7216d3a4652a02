# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: 3x3 same-padded convolution (shifted GEMMs through
scipy's BLAS) and Poisson-disc dart throwing.

Every function here has a drop-in twin in :mod:`kband._pykernels`; the two
must consume identical inputs and return identical shapes and dtypes.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport ceil
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _gemm(char *ta, char *tb, int m, int n, int k, real *a, int lda, real *b, int ldb,
                real beta, real *c, int ldc) noexcept nogil:
    # row-major C = op(A) op(B) + beta C, via column-major BLAS on the transposes
    cdef real one = 1
    if real is float:
        sgemm(tb, ta, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &ldc)
    else:
        dgemm(tb, ta, &n, &m, &k, &one, b, &ldb, a, &lda, &beta, c, &ldc)


# Each input plane is zero padded to (h + 2, w + 2) and flattened. In that
# layout tap (ky, kx) is a fixed offset d = (ky - 1) * (w + 2) + kx - 1, so the
# convolution is nine GEMMs over one contiguous range of padded positions.
# Positions in the pad columns inside the range are computed and discarded.

cdef inline Py_ssize_t _tap(Py_ssize_t k, Py_ssize_t wp) noexcept nogil:
    return (k // 3 - 1) * wp + k % 3 - 1


def _padded(a):
    out = np.zeros((a.shape[0], a.shape[1] + 2, a.shape[2] + 2), dtype=a.dtype)
    out[:, 1:-1, 1:-1] = a
    return out


def conv3x3_forward(real[:, :, ::1] x, real[:, :, :, ::1] w, real[::1] b):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], wp = wd + 2, plane = (h + 2) * wp
    cdef Py_ssize_t q0 = wp + 1, n = (h - 1) * wp + wd, k, o, r, c
    dtype = np.float32 if real is float else np.float64
    xp_arr = _padded(np.asarray(x))
    wk_arr = np.ascontiguousarray(np.asarray(w).reshape(cout, cin, 9).transpose(2, 0, 1))
    op_arr = np.zeros((cout, h + 2, wp), dtype=dtype)
    out_arr = np.empty((cout, h, wd), dtype=dtype)
    cdef real[:, :, ::1] xp = xp_arr, op = op_arr, out = out_arr
    cdef real[:, :, ::1] wk = wk_arr
    with nogil:
        for k in range(9):
            _gemm(b"N", b"N", cout, n, cin, &wk[k, 0, 0], cin, &xp[0, 0, 0] + q0 + _tap(k, wp), plane,
                  1, &op[0, 0, 0] + q0, plane)
        for o in range(cout):
            for r in range(h):
                for c in range(wd):
                    out[o, r, c] = op[o, r + 1, c + 1] + b[o]
    return out_arr


def conv3x3_backward(real[:, :, ::1] x, real[:, :, :, ::1] w, real[:, :, ::1] g):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], wp = wd + 2, plane = (h + 2) * wp
    cdef Py_ssize_t q0 = wp + 1, n = (h - 1) * wp + wd, k, o, i, r, c
    cdef real acc
    dtype = np.float32 if real is float else np.float64
    xp_arr = _padded(np.asarray(x))
    gp_arr = _padded(np.asarray(g))
    wk_arr = np.ascontiguousarray(np.asarray(w).reshape(cout, cin, 9).transpose(2, 0, 1))
    gxp_arr = np.zeros((cin, h + 2, wp), dtype=dtype)
    gwk_arr = np.empty((9, cout, cin), dtype=dtype)
    gx_arr = np.empty((cin, h, wd), dtype=dtype)
    gw_arr = np.empty((cout, cin, 3, 3), dtype=dtype)
    gb_arr = np.empty(cout, dtype=dtype)
    cdef real[:, :, ::1] xp = xp_arr, gp = gp_arr, gxp = gxp_arr, gx = gx_arr
    cdef real[:, :, ::1] wk = wk_arr, gwk = gwk_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[::1] gb = gb_arr
    with nogil:
        for k in range(9):
            # input gradient: tap k moves g back by its offset
            _gemm(b"T", b"N", cin, n, cout, &wk[k, 0, 0], cin, &gp[0, 0, 0] + q0 - _tap(k, wp), plane,
                  1, &gxp[0, 0, 0] + q0, plane)
            # weight gradient: g against the shifted input, pad zeros in g mask the wrap
            _gemm(b"N", b"T", cout, cin, n, &gp[0, 0, 0] + q0, plane, &xp[0, 0, 0] + q0 + _tap(k, wp), plane,
                  0, &gwk[k, 0, 0], cin)
        for i in range(cin):
            for r in range(h):
                for c in range(wd):
                    gx[i, r, c] = gxp[i, r + 1, c + 1]
        for o in range(cout):
            for i in range(cin):
                for k in range(9):
                    gw[o, i, k // 3, k % 3] = gwk[k, o, i]
            acc = 0
            for r in range(h):
                for c in range(wd):
                    acc = acc + g[o, r, c]
            gb[o] = acc
    return gx_arr, gw_arr, gb_arr


def poisson_disc_2d(double[:, ::1] radius, cnp.int64_t[::1] order, cnp.uint8_t[:, ::1] initial):
    """Accept candidates in ``order`` unless an accepted pixel lies closer than the candidate's radius."""
    cdef Py_ssize_t h = radius.shape[0], wd = radius.shape[1]
    cdef Py_ssize_t n = order.shape[0], t, idx, r, c, rr, cc, reach
    cdef double rad, dr, dc
    cdef bint blocked
    out_arr = np.array(initial, dtype=np.uint8, copy=True)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    with nogil:
        for t in range(n):
            idx = order[t]
            r = idx // wd
            c = idx - r * wd
            if out[r, c]:
                continue
            rad = radius[r, c]
            reach = <Py_ssize_t>ceil(rad)
            blocked = False
            for rr in range(r - reach, r + reach + 1):
                if rr < 0 or rr >= h:
                    continue
                dr = rr - r
                for cc in range(c - reach, c + reach + 1):
                    if cc < 0 or cc >= wd or not out[rr, cc]:
                        continue
                    dc = cc - c
                    if dr * dr + dc * dc < rad * rad:
                        blocked = True
                        break
                if blocked:
                    break
            if not blocked:
                out[r, c] = 1
    return out_arr


def poisson_disc_1d(double[::1] radius, cnp.int64_t[::1] order, cnp.uint8_t[::1] initial):
    cdef Py_ssize_t n = radius.shape[0], m = order.shape[0], t, c, cc, reach
    cdef double rad, d
    cdef bint blocked
    out_arr = np.array(initial, dtype=np.uint8, copy=True)
    cdef cnp.uint8_t[::1] out = out_arr
    with nogil:
        for t in range(m):
            c = order[t]
            if out[c]:
                continue
            rad = radius[c]
            reach = <Py_ssize_t>ceil(rad)
            blocked = False
            for cc in range(c - reach, c + reach + 1):
                if cc < 0 or cc >= n or not out[cc]:
                    continue
                d = cc - c
                if d * d < rad * rad:
                    blocked = True
                    break
            if not blocked:
                out[c] = 1
    return out_arr
