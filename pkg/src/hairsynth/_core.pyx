# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: patch gather (im2col) and its adjoint (col2im).

Both routines iterate in the same (c, i, j, n, y, x) order as the numpy
fallback so the two backends produce bit-identical sums.
"""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw):
    """Gather (N, C, Hp, Wp) into a (C*kh*kw, N*H*W) patch matrix."""
    cdef Py_ssize_t n_, c_, hp, wp, h, w
    n_ = xp.shape[0]
    c_ = xp.shape[1]
    hp = xp.shape[2]
    wp = xp.shape[3]
    h = hp - kh + 1
    w = wp - kw + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((c_ * kh * kw, n_ * h * w), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, n, y, x, row, col
    with nogil:
        for c in range(c_):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    col = 0
                    for n in range(n_):
                        for y in range(h):
                            for x in range(w):
                                out[row, col] = xp[n, c, y + i, x + j]
                                col = col + 1
    return out_arr


def col2im(real[:, ::1] cols, Py_ssize_t n_, Py_ssize_t c_, Py_ssize_t hp,
           Py_ssize_t wp, Py_ssize_t kh, Py_ssize_t kw):
    """Scatter-add a patch matrix back onto a zero (N, C, Hp, Wp) array."""
    cdef Py_ssize_t h = hp - kh + 1
    cdef Py_ssize_t w = wp - kw + 1
    if cols.shape[0] != c_ * kh * kw or cols.shape[1] != n_ * h * w:
        raise ValueError("patch matrix shape does not match geometry")
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_, c_, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, n, y, x, row, col
    with nogil:
        for c in range(c_):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    col = 0
                    for n in range(n_):
                        for y in range(h):
                            for x in range(w):
                                out[n, c, y + i, x + j] += cols[row, col]
                                col = col + 1
    return out_arr
