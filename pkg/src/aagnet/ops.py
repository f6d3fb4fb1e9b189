"""Differentiable ops over :class:`~aagnet.tensor.Tensor`.

Broadcasting is limited to a trailing-axis bias vector and Python scalars.
Everything else must match shapes exactly.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, record


def _unit_open(p: np.ndarray) -> np.ndarray:
    """Clamp into the open interval (0, 1); float rounding otherwise lands on
    0.0 or 1.0 for saturated inputs."""
    fi = np.finfo(p.dtype)
    return np.clip(p, fi.tiny, 1.0 - fi.epsneg)


def _is_scalar(v) -> bool:
    return isinstance(v, (int, float, np.floating, np.integer))


def _check_same(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    """a + b for equal shapes, a trailing-axis bias vector, or a scalar."""
    if _is_scalar(a):
        a, b = b, a
    a = as_tensor(a)
    if _is_scalar(b):
        c = b
        return record("add_scalar", (a,), a.data + a.dtype.type(c), lambda g: (g,))
    b = as_tensor(b, a.dtype)
    if a.shape == b.shape:
        return record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return record("add_bias", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: cannot combine {a.shape} with {b.shape}")


def sub(a, b) -> Tensor:
    if _is_scalar(a):
        b = as_tensor(b)
        c = b.dtype.type(a)
        return record("rsub_scalar", (b,), c - b.data, lambda g: (-g,))
    a = as_tensor(a)
    if _is_scalar(b):
        return add(a, -b)
    b = as_tensor(b, a.dtype)
    _check_same("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(a):
        a, b = b, a
    a = as_tensor(a)
    if _is_scalar(b):
        c = a.dtype.type(b)
        return record("mul_scalar", (a,), a.data * c, lambda g: (g * c,))
    b = as_tensor(b, a.dtype)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record("matmul", (a, b), ad @ bd, backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b[out])."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input last dim {x.shape[-1]} != weight rows {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return record("dense", inputs, out, backward)


# --------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return record("relu", (x,), np.where(mask, xd, 0).astype(xd.dtype), lambda g: (g * mask,))


def _sigmoid_raw(xd: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(xd))
    return np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _unit_open(_sigmoid_raw(x.data))
    return record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def swish(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid_raw(xd)
    return record("swish", (x,), xd * s, lambda g: (g * (s + xd * s * (1 - s)),))


# --------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return record("mean", (x,), x.data.mean(axis=axis), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """NHWC -> NC mean over both spatial axes."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NHWC, got {x.shape}")
    n, h, w, c = x.shape
    shape = x.shape

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, None, None, :], shape).copy(),)

    return record("global_avg_pool", (x,), x.data.mean(axis=(1, 2)), backward)


# ------------------------------------------------------------ shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record("transpose", (x,), np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(xs, axis: int = -1) -> Tensor:
    xs = list(xs)
    ref = xs[0]
    axis = axis % ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat: {t.shape} does not conform to {ref.shape} off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return record("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=axis), backward)


# ------------------------------------------------------------ normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = _unit_open(e / e.sum(axis=axis, keepdims=True))

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), y, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gamma, beta), xhat * gd + beta.data, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(keep)
    return record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# -------------------------------------------------------------- convolution


def conv_output_size(n: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-n // stride)
    if padding == "valid":
        return (n - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _pads(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """(output size, pad before, pad after); extra same-padding goes after."""
    out = conv_output_size(n, k, stride, padding)
    if padding == "valid":
        if n < k:
            raise ShapeError(f"valid conv: kernel {k} larger than input {n}")
        return out, 0, 0
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _prep_conv(op, x: Tensor, kh: int, kw: int, stride: int, padding: str):
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}")
    if x.ndim != 4 or 0 in x.shape:
        raise ShapeError(f"{op}: expected non-empty NHWC input, got {x.shape}")
    oh, pt, pb = _pads(x.shape[1], kh, stride, padding)
    ow, pl, pr = _pads(x.shape[2], kw, stride, padding)
    xd = x.data
    if pt or pb or pl or pr:
        xd = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return xd, oh, ow, (pt, pl)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """NHWC convolution with a (kh, kw, ci, co) kernel."""
    if kernel.ndim != 4 or x.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if x.dtype != kernel.dtype:
        raise TypeError(f"conv2d: dtype mismatch {x.dtype} vs {kernel.dtype}")
    kh, kw, _, co = kernel.shape
    xp, oh, ow, (pt, pl) = _prep_conv("conv2d", x, kh, kw, stride, padding)
    wd = kernel.data
    out = kernels.conv2d_forward(xp, wd, stride, oh, ow)
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
        out = out + bias.data
    h, w = x.shape[1], x.shape[2]

    def backward(g):
        g = np.ascontiguousarray(g)
        dxp = kernels.conv2d_backward_input(g, wd, stride, xp.shape)
        dx = np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + w, :])
        dw = kernels.conv2d_backward_weight(xp, g, stride, kh, kw)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, out, backward)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: str = "same") -> Tensor:
    """Per-channel NHWC convolution with a (kh, kw, c) kernel."""
    if kernel.ndim != 3 or x.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if x.dtype != kernel.dtype:
        raise TypeError(f"depthwise_conv2d: dtype mismatch {x.dtype} vs {kernel.dtype}")
    kh, kw, c = kernel.shape
    xp, oh, ow, (pt, pl) = _prep_conv("depthwise_conv2d", x, kh, kw, stride, padding)
    wd = kernel.data
    out = kernels.depthwise_forward(xp, wd, stride, oh, ow)
    if bias is not None:
        if bias.shape != (c,):
            raise ShapeError(f"depthwise_conv2d: bias shape {bias.shape} != ({c},)")
        out = out + bias.data
    h, w = x.shape[1], x.shape[2]

    def backward(g):
        g = np.ascontiguousarray(g)
        dxp = kernels.depthwise_backward_input(g, wd, stride, xp.shape)
        dx = np.ascontiguousarray(dxp[:, pt:pt + h, pl:pl + w, :])
        dw = kernels.depthwise_backward_weight(xp, g, stride, kh, kw)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("depthwise_conv2d", inputs, out, backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Valid max pooling; gradient goes to the first max in scan order."""
    if window < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: window/stride must be >= 1, got {window}/{stride}")
    if x.ndim != 4 or 0 in x.shape:
        raise ShapeError(f"maxpool2d: expected non-empty NHWC input, got {x.shape}")
    if window > x.shape[1] or window > x.shape[2]:
        raise ShapeError(f"maxpool2d: window {window} larger than input {x.shape[1:3]}")
    out, arg = kernels.maxpool_forward(x.data, window, stride)
    shape = x.shape

    def backward(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), arg, window, stride, shape),)

    return record("maxpool2d", (x,), out, backward)


# ----------------------------------------------------------- model-specific


def gated_fusion(alpha: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """alpha * a + (1 - alpha) * b, element-wise.

    The result is clipped to [min(a, b), max(a, b)]. That is a no-op in exact
    arithmetic and only removes final-ulp rounding excursions, so the
    gradient is that of the unclipped expression.
    """
    _check_same("gated_fusion", alpha, a)
    _check_same("gated_fusion", a, b)
    al, ad, bd = alpha.data, a.data, b.data
    one_minus = 1 - al
    out = al * ad + one_minus * bd
    out = np.clip(out, np.minimum(ad, bd), np.maximum(ad, bd))

    def backward(g):
        return g * (ad - bd), g * al, g * one_minus

    return record("gated_fusion", (alpha, a, b), out, backward)


def sparse_softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax(logits)[label], via log-sum-exp."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    xd = logits.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(xd.shape[0])
    n = xd.shape[0]
    loss = (lse - shifted[rows, labels]).mean()
    p = np.exp(shifted - lse[:, None])

    def backward(g):
        d = p.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    return record("sparse_ce", (logits,), np.asarray(loss, dtype=logits.dtype), backward)


__all__ = [
    "add", "sub", "mul", "matmul", "dense", "relu", "sigmoid", "swish", "sum", "mean",
    "global_avg_pool", "reshape", "transpose", "concat", "softmax", "log_softmax",
    "layer_norm", "dropout", "conv2d", "depthwise_conv2d", "maxpool2d", "gated_fusion",
    "sparse_softmax_cross_entropy", "conv_output_size",
]
