# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv/pool kernels. Same contract as ``_pykernels``."""

import numpy as np


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[3]
    out_arr = np.empty((n * ho * wo, k * k * c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, oi, oj, i, j, ch, row, col
    with nogil:
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    row = (b * ho + oi) * wo + oj
                    col = 0
                    for i in range(k):
                        for j in range(k):
                            for ch in range(c):
                                out[row, col] = xp[b, oi * stride + i, oj * stride + j, ch]
                                col += 1
    return out_arr


def col2im(const double[:, ::1] cols, Py_ssize_t n, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t c,
           Py_ssize_t k, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    out_arr = np.zeros((n, hp, wp, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oi, oj, i, j, ch, row, col
    with nogil:
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    row = (b * ho + oi) * wo + oj
                    col = 0
                    for i in range(k):
                        for j in range(k):
                            for ch in range(c):
                                out[b, oi * stride + i, oj * stride + j, ch] += cols[row, col]
                                col += 1
    return out_arr


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t p, Py_ssize_t stride, Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t n = x.shape[0], w = x.shape[2], c = x.shape[3]
    out_arr = np.empty((n, ho, wo, c), dtype=np.float64)
    arg_arr = np.empty((n, ho, wo, c), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, oi, oj, i, j, ch, r, q, best_idx
    cdef double best, v
    with nogil:
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    for ch in range(c):
                        r = oi * stride
                        q = oj * stride
                        best = x[b, r, q, ch]
                        best_idx = r * w + q
                        for i in range(p):
                            for j in range(p):
                                v = x[b, r + i, q + j, ch]
                                if v > best:
                                    best = v
                                    best_idx = (r + i) * w + q + j
                        out[b, oi, oj, ch] = best
                        arg[b, oi, oj, ch] = best_idx
    return out_arr, arg_arr


def maxpool_backward(const double[:, :, :, ::1] dout, const long long[:, :, :, ::1] argmax,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c = dout.shape[3]
    dx_arr = np.zeros((n, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, oi, oj, ch, idx
    with nogil:
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    for ch in range(c):
                        idx = argmax[b, oi, oj, ch]
                        dx[b, idx // w, idx % w, ch] += dout[b, oi, oj, ch]
    return dx_arr
