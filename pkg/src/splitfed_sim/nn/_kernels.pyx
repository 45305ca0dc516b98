# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im and 2x2 max-pooling kernels.

Loop orders mirror ``_kernels_py`` so both backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3x3(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ni, ci, kh, kw, i, j, si, sj, row, base
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((c * 9, n * h * w), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    for ci in range(c):
        for kh in range(3):
            for kw in range(3):
                row = ci * 9 + kh * 3 + kw
                for ni in range(n):
                    base = ni * h * w
                    for i in range(h):
                        si = i + kh - 1
                        if si < 0 or si >= h:
                            continue
                        for j in range(w):
                            sj = j + kw - 1
                            if 0 <= sj < w:
                                out[row, base + i * w + j] = x[ni, ci, si, sj]
    return out_arr


def col2im3x3(real[:, ::1] cols, shape):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ni, ci, kh, kw, i, j, si, sj, row, base
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    for ci in range(c):
        for kh in range(3):
            for kw in range(3):
                row = ci * 9 + kh * 3 + kw
                for ni in range(n):
                    base = ni * h * w
                    for i in range(h):
                        si = i + kh - 1
                        if si < 0 or si >= h:
                            continue
                        for j in range(w):
                            sj = j + kw - 1
                            if 0 <= sj < w:
                                out[ni, ci, si, sj] += cols[row, base + i * w + j]
    return out_arr


def maxpool2x2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    cdef Py_ssize_t ni, ci, i, j, k
    cdef real best, v
    cdef signed char a
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, c, ho, wo), dtype=dtype)
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int8)
    cdef real[:, :, :, ::1] y = y_arr
    cdef signed char[:, :, :, ::1] arg = arg_arr
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[ni, ci, 2 * i, 2 * j]
                    a = 0
                    for k in range(1, 4):
                        v = x[ni, ci, 2 * i + k // 2, 2 * j + k % 2]
                        if v > best:
                            best = v
                            a = <signed char>k
                    y[ni, ci, i, j] = best
                    arg[ni, ci, i, j] = a
    return y_arr, arg_arr


def maxpool2x2_backward(real[:, :, :, ::1] gy, signed char[:, :, :, ::1] arg, shape):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t ni, ci, i, j, k
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros(tuple(shape), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    k = arg[ni, ci, i, j]
                    gx[ni, ci, 2 * i + k // 2, 2 * j + k % 2] = gy[ni, ci, i, j]
    return gx_arr
