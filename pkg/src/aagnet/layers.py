"""Composite blocks: Fire module, MBConv, multi-head self-attention and the
pre-norm transformer encoder layer.

Each block has three pieces: ``*_init`` creates a dict of parameter arrays
keyed by local name, ``*_param_count`` is the closed-form parameter count,
and ``*_forward`` runs the block given a mapping local name -> Tensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class FireSpec:
    squeeze_ch: int
    expand_total_ch: int  # split evenly between the 1x1 and 3x3 expand paths

    def __post_init__(self):
        if self.expand_total_ch % 2:
            raise ValueError(f"expand_total_ch must be even, got {self.expand_total_ch}")
        if not 0 < self.squeeze_ch < self.expand_total_ch:
            raise ValueError(f"need 0 < squeeze_ch < expand_total_ch, got {self}")

    @property
    def expand_ch(self) -> int:
        return self.expand_total_ch // 2


@dataclass(frozen=True)
class MBConvSpec:
    in_ch: int
    out_ch: int
    stride: int = 1
    expansion: int = 3

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"MBConv stride must be 1 or 2, got {self.stride}")

    @property
    def hidden_ch(self) -> int:
        return self.in_ch * self.expansion

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


@dataclass(frozen=True)
class AttentionSpec:
    model_dim: int = 160
    heads: int = 4
    mlp_expansion: int = 2

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return self.model_dim * self.mlp_expansion


# ------------------------------------------------------------ initialisers


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def conv_init(rng, kh, kw, ci, co, dtype) -> dict[str, np.ndarray]:
    return {
        "kernel": glorot_uniform(rng, (kh, kw, ci, co), kh * kw * ci, kh * kw * co, dtype),
        "bias": np.zeros(co, dtype=dtype),
    }


def depthwise_init(rng, kh, kw, c, dtype) -> dict[str, np.ndarray]:
    return {
        "kernel": glorot_uniform(rng, (kh, kw, c), kh * kw, kh * kw, dtype),
        "bias": np.zeros(c, dtype=dtype),
    }


def dense_init(rng, fan_in, fan_out, dtype) -> dict[str, np.ndarray]:
    return {
        "weight": glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out, dtype),
        "bias": np.zeros(fan_out, dtype=dtype),
    }


def norm_init(dim, dtype) -> dict[str, np.ndarray]:
    return {"gamma": np.ones(dim, dtype=dtype), "beta": np.zeros(dim, dtype=dtype)}


def prefixed(prefix: str, arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


def scope(params: Params, prefix: str) -> dict[str, Tensor]:
    """View of ``params`` restricted to ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    n = len(p)
    return {k[n:]: v for k, v in params.items() if k.startswith(p)}


def conv_param_count(kh, kw, ci, co) -> int:
    return kh * kw * ci * co + co


def dense_param_count(fan_in, fan_out) -> int:
    return fan_in * fan_out + fan_out


# ---------------------------------------------------------------- fire


def fire_init(rng, in_ch: int, spec: FireSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    e = spec.expand_ch
    out = {}
    out.update(prefixed("squeeze", conv_init(rng, 1, 1, in_ch, spec.squeeze_ch, dtype)))
    out.update(prefixed("expand1x1", conv_init(rng, 1, 1, spec.squeeze_ch, e, dtype)))
    out.update(prefixed("expand3x3", conv_init(rng, 3, 3, spec.squeeze_ch, e, dtype)))
    return out


def fire_param_count(in_ch: int, spec: FireSpec) -> int:
    s, e = spec.squeeze_ch, spec.expand_ch
    return s * (in_ch + 1) + e * (s + 1) + e * (9 * s + 1)


def fire_forward(x: Tensor, spec: FireSpec, params: Params) -> Tensor:
    w = params["squeeze.kernel"]
    if x.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"fire: input {x.shape} does not match squeeze kernel {w.shape}")
    s = ops.relu(ops.conv2d(x, w, params["squeeze.bias"], 1, "same"))
    e1 = ops.relu(ops.conv2d(s, params["expand1x1.kernel"], params["expand1x1.bias"], 1, "same"))
    e3 = ops.relu(ops.conv2d(s, params["expand3x3.kernel"], params["expand3x3.bias"], 1, "same"))
    return ops.concat([e1, e3], axis=-1)


# -------------------------------------------------------------- mbconv


def mbconv_init(rng, spec: MBConvSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    hid = spec.hidden_ch
    out = {}
    out.update(prefixed("expand", conv_init(rng, 1, 1, spec.in_ch, hid, dtype)))
    out.update(prefixed("depthwise", depthwise_init(rng, 3, 3, hid, dtype)))
    out.update(prefixed("project", conv_init(rng, 1, 1, hid, spec.out_ch, dtype)))
    return out


def mbconv_param_count(spec: MBConvSpec) -> int:
    hid = spec.hidden_ch
    return (spec.in_ch + 1) * hid + 10 * hid + (hid + 1) * spec.out_ch


def mbconv_forward(x: Tensor, spec: MBConvSpec, params: Params) -> Tensor:
    if x.ndim != 4 or x.shape[3] != spec.in_ch:
        raise ShapeError(f"mbconv: input {x.shape} does not have {spec.in_ch} channels")
    h = ops.swish(ops.conv2d(x, params["expand.kernel"], params["expand.bias"], 1, "same"))
    h = ops.swish(ops.depthwise_conv2d(h, params["depthwise.kernel"], params["depthwise.bias"],
                                       spec.stride, "same"))
    h = ops.conv2d(h, params["project.kernel"], params["project.bias"], 1, "same")
    if spec.residual:
        h = ops.add(x, h)
    return h


# ------------------------------------------------------------ attention


def mhsa_init(rng, spec: AttentionSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    d = spec.model_dim
    out = {}
    for name in ("query", "key", "value", "out"):
        out.update(prefixed(name, dense_init(rng, d, d, dtype)))
    return out


def mhsa_param_count(spec: AttentionSpec) -> int:
    return 4 * dense_param_count(spec.model_dim, spec.model_dim)


def mhsa(tokens: Tensor, spec: AttentionSpec, params: Params, return_attention: bool = False):
    """Scaled dot-product self-attention over N x T x D tokens.

    With ``return_attention`` the N x heads x T x T weight tensor is returned
    alongside the output.
    """
    if tokens.ndim != 3 or tokens.shape[2] != spec.model_dim:
        raise ShapeError(f"mhsa: expected N x T x {spec.model_dim}, got {tokens.shape}")
    n, t, d = tokens.shape
    h, dh = spec.heads, spec.head_dim

    def heads(name):
        proj = ops.dense(tokens, params[f"{name}.weight"], params[f"{name}.bias"])
        return ops.transpose(ops.reshape(proj, (n, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ops.softmax(scores, axis=-1)
    ctx = ops.matmul(attn, v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    out = ops.dense(ctx, params["out.weight"], params["out.bias"])
    if return_attention:
        return out, attn
    return out


def encoder_init(rng, spec: AttentionSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    d, m = spec.model_dim, spec.mlp_dim
    out = {}
    out.update(prefixed("norm1", norm_init(d, dtype)))
    out.update(prefixed("attn", mhsa_init(rng, spec, dtype)))
    out.update(prefixed("norm2", norm_init(d, dtype)))
    out.update(prefixed("mlp1", dense_init(rng, d, m, dtype)))
    out.update(prefixed("mlp2", dense_init(rng, m, d, dtype)))
    return out


def encoder_param_count(spec: AttentionSpec) -> int:
    d, m = spec.model_dim, spec.mlp_dim
    return 4 * d + mhsa_param_count(spec) + dense_param_count(d, m) + dense_param_count(m, d)


def transformer_encoder(tokens: Tensor, spec: AttentionSpec, params: Params) -> Tensor:
    """Pre-norm layer: x + MHSA(LN(x)), then x + MLP(LN(x))."""
    if tokens.ndim != 3 or tokens.shape[2] != spec.model_dim:
        raise ShapeError(f"encoder: expected token dim {spec.model_dim}, got {tokens.shape}")
    h = ops.layer_norm(tokens, params["norm1.gamma"], params["norm1.beta"])
    x = ops.add(tokens, mhsa(h, spec, scope(params, "attn")))
    h = ops.layer_norm(x, params["norm2.gamma"], params["norm2.beta"])
    h = ops.swish(ops.dense(h, params["mlp1.weight"], params["mlp1.bias"]))
    h = ops.dense(h, params["mlp2.weight"], params["mlp2.bias"])
    return ops.add(x, h)
