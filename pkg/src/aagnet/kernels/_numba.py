"""numba-compiled kernels mirroring :mod:`aagnet.kernels._numpy`.

Parallel loops only run over independent outputs; every reduction keeps a
fixed order so results are bit-stable regardless of thread count.
"""
import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def _im2col(xp, kh, kw, stride, out_h, out_w):
    n = xp.shape[0]
    ci = xp.shape[3]
    if kh == 1 and kw == 1 and stride == 1:
        return np.ascontiguousarray(xp).reshape(n * out_h * out_w, ci)
    cols = np.empty((n * out_h * out_w, kh * kw * ci), dtype=xp.dtype)
    for r in prange(n * out_h):
        b = r // out_h
        oh = r % out_h
        for ow in range(out_w):
            row = r * out_w + ow
            for i in range(kh):
                for j in range(kw):
                    base = (i * kw + j) * ci
                    h = oh * stride + i
                    v = ow * stride + j
                    for c in range(ci):
                        cols[row, base + c] = xp[b, h, v, c]
    return cols


@njit(parallel=True, cache=True)
def _col2im(dcols, padded_shape, kh, kw, stride, out_h, out_w):
    n, _, _, ci = padded_shape
    if kh == 1 and kw == 1 and stride == 1:
        return dcols.reshape(padded_shape)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    # one thread per image; the scatter order inside an image is fixed
    for b in prange(n):
        for oh in range(out_h):
            for ow in range(out_w):
                row = (b * out_h + oh) * out_w + ow
                for i in range(kh):
                    for j in range(kw):
                        base = (i * kw + j) * ci
                        h = oh * stride + i
                        v = ow * stride + j
                        for c in range(ci):
                            dxp[b, h, v, c] += dcols[row, base + c]
    return dxp


# Dense convolutions lower to one GEMM over an im2col matrix: the parallel
# gather/scatter is numba, the product is BLAS via np.dot.


@njit(cache=True)
def conv2d_forward(xp, w, stride, out_h, out_w):
    kh, kw, ci, co = w.shape
    n = xp.shape[0]
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    w2 = np.ascontiguousarray(w).reshape(kh * kw * ci, co)
    return np.dot(cols, w2).reshape(n, out_h, out_w, co)


@njit(cache=True)
def conv2d_backward_input(dy, w, stride, padded_shape):
    kh, kw, ci, co = w.shape
    n, out_h, out_w, _ = dy.shape
    dy2 = np.ascontiguousarray(dy).reshape(n * out_h * out_w, co)
    w2t = np.ascontiguousarray(np.ascontiguousarray(w).reshape(kh * kw * ci, co).T)
    dcols = np.dot(dy2, w2t)
    return _col2im(dcols, padded_shape, kh, kw, stride, out_h, out_w)


@njit(cache=True)
def conv2d_backward_weight(xp, dy, stride, kh, kw):
    n, out_h, out_w, co = dy.shape
    ci = xp.shape[3]
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    dy2 = np.ascontiguousarray(dy).reshape(n * out_h * out_w, co)
    return np.dot(cols.T, dy2).reshape(kh, kw, ci, co)


@njit(parallel=True, cache=True)
def depthwise_forward(xp, w, stride, out_h, out_w):
    kh, kw, c = w.shape
    n = xp.shape[0]
    out = np.zeros((n, out_h, out_w, c), dtype=xp.dtype)
    for b in prange(n):
        for oh in range(out_h):
            for ow in range(out_w):
                for i in range(kh):
                    for j in range(kw):
                        h = oh * stride + i
                        v = ow * stride + j
                        for k in range(c):
                            out[b, oh, ow, k] += xp[b, h, v, k] * w[i, j, k]
    return out


@njit(parallel=True, cache=True)
def depthwise_backward_input(dy, w, stride, padded_shape):
    kh, kw, c = w.shape
    n, out_h, out_w, _ = dy.shape
    dxp = np.zeros(padded_shape, dtype=dy.dtype)
    for b in prange(n):
        for oh in range(out_h):
            for ow in range(out_w):
                for i in range(kh):
                    for j in range(kw):
                        h = oh * stride + i
                        v = ow * stride + j
                        for k in range(c):
                            dxp[b, h, v, k] += dy[b, oh, ow, k] * w[i, j, k]
    return dxp


@njit(parallel=True, cache=True)
def depthwise_backward_weight(xp, dy, stride, kh, kw):
    n, out_h, out_w, c = dy.shape
    dw = np.zeros((kh, kw, c), dtype=dy.dtype)
    for t in prange(kh * kw):
        i = t // kw
        j = t % kw
        for b in range(n):
            for oh in range(out_h):
                for ow in range(out_w):
                    h = oh * stride + i
                    v = ow * stride + j
                    for k in range(c):
                        dw[i, j, k] += xp[b, h, v, k] * dy[b, oh, ow, k]
    return dw


@njit(parallel=True, cache=True)
def maxpool_forward(x, window, stride):
    n, h, w, c = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    out = np.empty((n, out_h, out_w, c), dtype=x.dtype)
    arg = np.zeros((n, out_h, out_w, c), dtype=np.int64)
    for b in prange(n):
        for oh in range(out_h):
            for ow in range(out_w):
                for k in range(c):
                    best = x[b, oh * stride, ow * stride, k]
                    idx = 0
                    for i in range(window):
                        for j in range(window):
                            val = x[b, oh * stride + i, ow * stride + j, k]
                            if val > best:
                                best = val
                                idx = i * window + j
                    out[b, oh, ow, k] = best
                    arg[b, oh, ow, k] = idx
    return out, arg


@njit(parallel=True, cache=True)
def maxpool_backward(dy, arg, window, stride, in_shape):
    n, out_h, out_w, c = dy.shape
    dx = np.zeros(in_shape, dtype=dy.dtype)
    for b in prange(n):
        for oh in range(out_h):
            for ow in range(out_w):
                for k in range(c):
                    a = arg[b, oh, ow, k]
                    dx[b, oh * stride + a // window, ow * stride + a % window, k] += dy[b, oh, ow, k]
    return dx
