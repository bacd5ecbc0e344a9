# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: im2col/col2im, depthwise convolution, bilinear upsampling.

All routines accept C-contiguous float32 or float64 arrays and loop in a fixed
order so results are bit-reproducible.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((C * k * k, Ho * Wo), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t c, ki, kj, oi, oj, row, ii, jj
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for oi in range(Ho):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= H:
                        continue
                    for oj in range(Wo):
                        jj = oj * stride + kj - pad
                        if jj < 0 or jj >= W:
                            continue
                        cols[row, oi * Wo + oj] = x[c, ii, jj]
    return out


def col2im(floating[:, ::1] cols, int C, int H, int W, int k, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((C, H, W), dtype=dtype)
    cdef floating[:, :, ::1] x = out
    cdef Py_ssize_t c, ki, kj, oi, oj, row, ii, jj
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for oi in range(Ho):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= H:
                        continue
                    for oj in range(Wo):
                        jj = oj * stride + kj - pad
                        if jj < 0 or jj >= W:
                            continue
                        x[c, ii, jj] += cols[row, oi * Wo + oj]
    return out


def dwconv_forward(floating[:, :, ::1] x, floating[:, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2], k = w.shape[1]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((C, Ho, Wo), dtype=dtype)
    cdef floating[:, :, ::1] y = out
    cdef Py_ssize_t c, ki, kj, oi, oj, ii, jj
    cdef floating acc
    for c in range(C):
        for oi in range(Ho):
            for oj in range(Wo):
                acc = 0
                for ki in range(k):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= H:
                        continue
                    for kj in range(k):
                        jj = oj * stride + kj - pad
                        if jj < 0 or jj >= W:
                            continue
                        acc = acc + w[c, ki, kj] * x[c, ii, jj]
                y[c, oi, oj] = acc
    return out


def dwconv_backward(floating[:, :, ::1] gy, floating[:, :, ::1] x, floating[:, :, ::1] w,
                    int stride, int pad):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2], k = w.shape[1]
    cdef Py_ssize_t Ho = gy.shape[1], Wo = gy.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((C, H, W), dtype=dtype)
    gw_arr = np.zeros((C, k, k), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef floating[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t c, ki, kj, oi, oj, ii, jj
    cdef floating g
    for c in range(C):
        for oi in range(Ho):
            for oj in range(Wo):
                g = gy[c, oi, oj]
                for ki in range(k):
                    ii = oi * stride + ki - pad
                    if ii < 0 or ii >= H:
                        continue
                    for kj in range(k):
                        jj = oj * stride + kj - pad
                        if jj < 0 or jj >= W:
                            continue
                        gx[c, ii, jj] += w[c, ki, kj] * g
                        gw[c, ki, kj] += x[c, ii, jj] * g
    return gx_arr, gw_arr


cdef inline void _taps(Py_ssize_t n_in, Py_ssize_t n_out, Py_ssize_t[::1] lo,
                       Py_ssize_t[::1] hi, double[::1] frac):
    cdef double scale = <double>n_in / <double>n_out
    cdef double src
    cdef Py_ssize_t i, i0
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        if src < 0:
            src = 0
        i0 = <Py_ssize_t>src
        if i0 > n_in - 1:
            i0 = n_in - 1
        lo[i] = i0
        hi[i] = i0 + 1 if i0 < n_in - 1 else i0
        frac[i] = src - i0


def upsample_forward(floating[:, :, ::1] x, int out_h, int out_w):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((C, out_h, out_w), dtype=dtype)
    cdef floating[:, :, ::1] y = out
    cdef Py_ssize_t[::1] h0 = np.empty(out_h, dtype=np.intp)
    cdef Py_ssize_t[::1] h1 = np.empty(out_h, dtype=np.intp)
    cdef double[::1] fh = np.empty(out_h)
    cdef Py_ssize_t[::1] w0 = np.empty(out_w, dtype=np.intp)
    cdef Py_ssize_t[::1] w1 = np.empty(out_w, dtype=np.intp)
    cdef double[::1] fw = np.empty(out_w)
    _taps(H, out_h, h0, h1, fh)
    _taps(W, out_w, w0, w1, fw)
    cdef Py_ssize_t c, i, j
    cdef floating a, b, ly, lx
    for c in range(C):
        for i in range(out_h):
            ly = <floating>fh[i]
            for j in range(out_w):
                lx = <floating>fw[j]
                a = x[c, h0[i], w0[j]] * (1 - lx) + x[c, h0[i], w1[j]] * lx
                b = x[c, h1[i], w0[j]] * (1 - lx) + x[c, h1[i], w1[j]] * lx
                y[c, i, j] = a * (1 - ly) + b * ly
    return out


def upsample_backward(floating[:, :, ::1] gy, int H, int W):
    cdef Py_ssize_t C = gy.shape[0], out_h = gy.shape[1], out_w = gy.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((C, H, W), dtype=dtype)
    cdef floating[:, :, ::1] gx = out
    cdef Py_ssize_t[::1] h0 = np.empty(out_h, dtype=np.intp)
    cdef Py_ssize_t[::1] h1 = np.empty(out_h, dtype=np.intp)
    cdef double[::1] fh = np.empty(out_h)
    cdef Py_ssize_t[::1] w0 = np.empty(out_w, dtype=np.intp)
    cdef Py_ssize_t[::1] w1 = np.empty(out_w, dtype=np.intp)
    cdef double[::1] fw = np.empty(out_w)
    _taps(H, out_h, h0, h1, fh)
    _taps(W, out_w, w0, w1, fw)
    cdef Py_ssize_t c, i, j
    cdef floating g, ly, lx
    for c in range(C):
        for i in range(out_h):
            ly = <floating>fh[i]
            for j in range(out_w):
                lx = <floating>fw[j]
                g = gy[c, i, j]
                gx[c, h0[i], w0[j]] += g * (1 - ly) * (1 - lx)
                gx[c, h0[i], w1[j]] += g * (1 - ly) * lx
                gx[c, h1[i], w0[j]] += g * ly * (1 - lx)
                gx[c, h1[i], w1[j]] += g * ly * lx
    return out
