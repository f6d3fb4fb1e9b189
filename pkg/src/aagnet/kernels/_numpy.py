"""Pure-numpy reference kernels.

All kernels take NHWC arrays whose spatial padding has already been applied
by the caller, so the arithmetic here is always "valid" convolution.
"""
import numpy as np


def conv2d_forward(xp, w, stride, out_h, out_w):
    kh, kw, _, co = w.shape
    n = xp.shape[0]
    out = np.zeros((n, out_h, out_w, co), dtype=xp.dtype)
    h_span = (out_h - 1) * stride + 1
    w_span = (out_w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + h_span:stride, j:j + w_span:stride, :]
            out += patch @ w[i, j]
    return out


def conv2d_backward_input(dy, w, stride, padded_shape):
    kh, kw, _, _ = w.shape
    _, out_h, out_w, _ = dy.shape
    dxp = np.zeros(padded_shape, dtype=dy.dtype)
    h_span = (out_h - 1) * stride + 1
    w_span = (out_w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h_span:stride, j:j + w_span:stride, :] += dy @ w[i, j].T
    return dxp


def conv2d_backward_weight(xp, dy, stride, kh, kw):
    _, out_h, out_w, co = dy.shape
    ci = xp.shape[3]
    dw = np.empty((kh, kw, ci, co), dtype=dy.dtype)
    h_span = (out_h - 1) * stride + 1
    w_span = (out_w - 1) * stride + 1
    dy2 = dy.reshape(-1, co)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + h_span:stride, j:j + w_span:stride, :].reshape(-1, ci)
            dw[i, j] = patch.T @ dy2
    return dw


def depthwise_forward(xp, w, stride, out_h, out_w):
    kh, kw, c = w.shape
    n = xp.shape[0]
    out = np.zeros((n, out_h, out_w, c), dtype=xp.dtype)
    h_span = (out_h - 1) * stride + 1
    w_span = (out_w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + h_span:stride, j:j + w_span:stride, :] * w[i, j]
    return out


def depthwise_backward_input(dy, w, stride, padded_shape):
    kh, kw, _ = w.shape
    _, out_h, out_w, _ = dy.shape
    dxp = np.zeros(padded_shape, dtype=dy.dtype)
    h_span = (out_h - 1) * stride + 1
    w_span = (out_w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h_span:stride, j:j + w_span:stride, :] += dy * w[i, j]
    return dxp


def depthwise_backward_weight(xp, dy, stride, kh, kw):
    _, out_h, out_w, c = dy.shape
    dw = np.empty((kh, kw, c), dtype=dy.dtype)
    h_span = (out_h - 1) * stride + 1
    w_span = (out_w - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + h_span:stride, j:j + w_span:stride, :]
            dw[i, j] = (patch * dy).sum(axis=(0, 1, 2))
    return dw


def maxpool_forward(x, window, stride):
    """Return pooled values and the in-window flat index of each max.

    Ties resolve to the first maximum in row-major window scan order.
    """
    n, h, w, c = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    h_span = (out_h - 1) * stride + 1
    w_span = (out_w - 1) * stride + 1
    out = x[:, 0:h_span:stride, 0:w_span:stride, :].copy()
    arg = np.zeros(out.shape, dtype=np.int64)
    for i in range(window):
        for j in range(window):
            if i == 0 and j == 0:
                continue
            cand = x[:, i:i + h_span:stride, j:j + w_span:stride, :]
            better = cand > out
            out = np.where(better, cand, out)
            arg[better] = i * window + j
    return out, arg


def maxpool_backward(dy, arg, window, stride, in_shape):
    dx = np.zeros(in_shape, dtype=dy.dtype)
    _, out_h, out_w, _ = dy.shape
    h_span = (out_h - 1) * stride + 1
    w_span = (out_w - 1) * stride + 1
    for i in range(window):
        for j in range(window):
            sel = arg == i * window + j
            dx[:, i:i + h_span:stride, j:j + w_span:stride, :] += np.where(sel, dy, 0)
    return dx
