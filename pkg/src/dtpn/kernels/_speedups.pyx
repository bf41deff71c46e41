# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in _reference.py.

Direct typed loops over (time x channel) buffers; no padded copies are
materialized, out-of-range taps are skipped instead.  float32 and float64
are both supported so the 64-bit gradient-check mode runs through the
same code path as production.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def conv1d_forward(real[:, ::1] x, real[:, :, ::1] w, real[::1] b,
                   int stride, int pad_left, int pad_right):
    cdef Py_ssize_t t_in = x.shape[0]
    cdef Py_ssize_t cin = x.shape[1]
    cdef Py_ssize_t kernel = w.shape[0]
    cdef Py_ssize_t cout = w.shape[2]
    cdef Py_ssize_t t_padded = t_in + pad_left + pad_right
    cdef Py_ssize_t t_out = (t_padded - kernel) // stride + 1
    if t_out < 1:
        raise ValueError(
            f"kernel {kernel} longer than padded input of {t_padded} steps"
        )

    out = np.empty((t_out, cout), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = out
    cdef Py_ssize_t t, u, ci, co, ti
    cdef real xv
    for t in range(t_out):
        for co in range(cout):
            y[t, co] = b[co]
        for u in range(kernel):
            ti = t * stride + u - pad_left
            if ti < 0 or ti >= t_in:
                continue
            for ci in range(cin):
                xv = x[ti, ci]
                for co in range(cout):
                    y[t, co] += xv * w[u, ci, co]
    return out


def conv1d_backward(real[:, ::1] x, real[:, :, ::1] w,
                    int stride, int pad_left, int pad_right,
                    real[:, ::1] gy):
    cdef Py_ssize_t t_in = x.shape[0]
    cdef Py_ssize_t cin = x.shape[1]
    cdef Py_ssize_t kernel = w.shape[0]
    cdef Py_ssize_t cout = w.shape[2]
    cdef Py_ssize_t t_out = gy.shape[0]

    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((t_in, cin), dtype=dtype)
    gw_arr = np.zeros((kernel, cin, cout), dtype=dtype)
    gb_arr = np.zeros(cout, dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef real[:, :, ::1] gw = gw_arr
    cdef real[::1] gb = gb_arr

    cdef Py_ssize_t t, u, ci, co, ti
    cdef real xv, acc, g
    for t in range(t_out):
        for co in range(cout):
            gb[co] += gy[t, co]
        for u in range(kernel):
            ti = t * stride + u - pad_left
            if ti < 0 or ti >= t_in:
                continue
            for ci in range(cin):
                xv = x[ti, ci]
                acc = 0
                for co in range(cout):
                    g = gy[t, co]
                    gw[u, ci, co] += xv * g
                    acc += w[u, ci, co] * g
                gx[ti, ci] += acc
    return gx_arr, gw_arr, gb_arr


def maxpool1d_forward(real[:, ::1] x, int window, int stride):
    cdef Py_ssize_t t_in = x.shape[0]
    cdef Py_ssize_t channels = x.shape[1]
    cdef Py_ssize_t t_out = (t_in + stride - 1) // stride

    out = np.empty((t_out, channels), dtype=np.float32 if real is float else np.float64)
    arg = np.empty((t_out, channels), dtype=np.int64)
    cdef real[:, ::1] y = out
    cdef cnp.int64_t[:, ::1] argmax = arg

    cdef Py_ssize_t t, c, lo, hi, ti, best_i
    cdef real best
    for t in range(t_out):
        lo = t * stride
        hi = lo + window
        if hi > t_in:
            hi = t_in
        for c in range(channels):
            best = x[lo, c]
            best_i = lo
            for ti in range(lo + 1, hi):
                if x[ti, c] > best:
                    best = x[ti, c]
                    best_i = ti
            y[t, c] = best
            argmax[t, c] = best_i
    return out, arg


def maxpool1d_backward(cnp.int64_t[:, ::1] argmax, Py_ssize_t t_in, real[:, ::1] gy):
    cdef Py_ssize_t t_out = gy.shape[0]
    cdef Py_ssize_t channels = gy.shape[1]
    gx_arr = np.zeros((t_in, channels), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef Py_ssize_t t, c
    for t in range(t_out):
        for c in range(channels):
            gx[argmax[t, c], c] += gy[t, c]
    return gx_arr
