"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and semantics; used when the extension is not built or when
``MMSFORMER_KERNELS=python`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def im2col(x, k, stride, pad):
    C, H, W = x.shape
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    win = sliding_window_view(_pad(x, pad), (k, k), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # [C, Ho, Wo, k, k] -> [C, k, k, Ho, Wo]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * k * k, Ho * Wo)


def col2im(cols, C, H, W, k, stride, pad):
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    cols = cols.reshape(C, k, k, Ho, Wo)
    out = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride] += cols[:, ki, kj]
    return np.ascontiguousarray(out[:, pad : pad + H, pad : pad + W])


def dwconv_forward(x, w, stride, pad):
    C, H, W = x.shape
    k = w.shape[1]
    Ho, Wo = _out_extent(H, k, stride, pad), _out_extent(W, k, stride, pad)
    xp = _pad(x, pad)
    y = np.zeros((C, Ho, Wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            y += w[:, ki, kj, None, None] * xp[:, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride]
    return y


def dwconv_backward(gy, x, w, stride, pad):
    C, H, W = x.shape
    k = w.shape[1]
    Ho, Wo = gy.shape[1:]
    xp = _pad(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for ki in range(k):
        for kj in range(k):
            sl = (slice(None), slice(ki, ki + stride * Ho, stride), slice(kj, kj + stride * Wo, stride))
            gxp[sl] += w[:, ki, kj, None, None] * gy
            gw[:, ki, kj] = (xp[sl] * gy).sum(axis=(1, 2))
    return np.ascontiguousarray(gxp[:, pad : pad + H, pad : pad + W]), gw


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row i holds the bilinear weights of output sample i over the input axis."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    A = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(A, (rows, lo), 1.0 - frac)
    np.add.at(A, (rows, hi), frac)
    return A.astype(dtype)


def upsample_forward(x, out_h, out_w):
    _, H, W = x.shape
    Ah = interp_matrix(H, out_h, x.dtype)
    Aw = interp_matrix(W, out_w, x.dtype)
    return np.ascontiguousarray(np.einsum("ih,chw,jw->cij", Ah, x, Aw))


def upsample_backward(gy, H, W):
    _, out_h, out_w = gy.shape
    Ah = interp_matrix(H, out_h, gy.dtype)
    Aw = interp_matrix(W, out_w, gy.dtype)
    return np.ascontiguousarray(np.einsum("ih,cij,jw->chw", Ah, gy, Aw))
