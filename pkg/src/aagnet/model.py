"""Hybrid SqueezeNet / MobileViT classifier fused by an adaptive attention gate.

Parameter naming is hierarchical (``cnn.fire2.squeeze.kernel``); the first
dotted components of a name identify the layer that owns it, which is what
:func:`layer_summary` relies on.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import layers as L
from . import ops
from .tensor import ShapeError, Tensor

DEFAULT_FIRE_STAGES = (
    ((16, 64), (16, 64)),
    ((24, 96), (24, 96)),
    ((32, 128), (32, 128)),
)


@dataclass(frozen=True)
class ModelConfig:
    input_hw: int = 128
    input_ch: int = 3
    num_classes: int = 4
    fusion_dim: int = 256
    # CNN branch: stem conv, then per stage one 2x2 max pool followed by fire modules
    cnn_stem_ch: int = 32
    fire_stages: tuple = DEFAULT_FIRE_STAGES
    # global branch
    vit_stem_ch: int = 16
    mbconv_channels: tuple = (32, 64, 96)
    mbconv_expansion: int = 3
    token_dim: int = 160
    depth: int = 2
    heads: int = 4
    mlp_expansion: int = 2
    # gate and head
    gate_hidden: int = 256
    gate_dropout: float = 0.1
    head_hidden: int = 128
    head_dropout1: float = 0.3
    head_dropout2: float = 0.2
    scale_factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "fire_stages",
                           tuple(tuple(tuple(f) for f in st) for st in self.fire_stages))
        object.__setattr__(self, "mbconv_channels", tuple(self.mbconv_channels))
        if self.input_hw < 1 or self.input_ch < 1 or self.num_classes < 2:
            raise ValueError(f"invalid input/class configuration: {self}")
        if not self.fire_stages or any(len(st) == 0 for st in self.fire_stages):
            raise ValueError("every CNN stage needs at least one fire module")
        for st in self.fire_stages:
            for s, e in st:
                L.FireSpec(s, e)
        L.AttentionSpec(self.token_dim, self.heads, self.mlp_expansion)
        cnn_div = 2 * 2 ** len(self.fire_stages)
        vit_div = 2 * 2 ** len(self.mbconv_channels)
        for div, branch in ((cnn_div, "CNN"), (vit_div, "global")):
            if self.input_hw % div:
                raise ValueError(
                    f"inconsistent spatial plan: input {self.input_hw} is not divisible by the "
                    f"{branch} branch's total downsampling {div}")

    @classmethod
    def scaled(cls, scale: float, min_width: int = 8, **overrides) -> ModelConfig:
        """Default architecture with every width and the input size multiplied
        by ``scale``.

        Channel widths are rounded and floored at ``min_width`` (fire expand
        paths at ``min_width`` each) so tiny configs keep enough ReLU units
        alive to train. The input size is scaled without a floor.
        """
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        d = cls()

        def w(v):
            return max(min_width, int(round(v * scale)))

        def fire(s, e):
            e2 = 2 * max(min_width, int(round(e * scale / 2)))
            return (min(w(s), e2 - 1), e2)

        kw = dict(
            input_hw=max(1, int(round(d.input_hw * scale))),
            fusion_dim=w(d.fusion_dim),
            cnn_stem_ch=w(d.cnn_stem_ch),
            fire_stages=tuple(tuple(fire(s, e) for s, e in st) for st in d.fire_stages),
            vit_stem_ch=w(d.vit_stem_ch),
            mbconv_channels=tuple(w(c) for c in d.mbconv_channels),
            token_dim=d.heads * max(-(-min_width // d.heads), int(round(d.token_dim * scale / d.heads))),
            gate_hidden=w(d.gate_hidden),
            head_hidden=w(d.head_hidden),
            scale_factor=float(scale),
        )
        kw.update(overrides)
        return cls(**kw)

    @property
    def fire_specs(self) -> list[L.FireSpec]:
        return [L.FireSpec(s, e) for st in self.fire_stages for s, e in st]

    @property
    def cnn_out_ch(self) -> int:
        return self.fire_stages[-1][-1][1]

    @property
    def mbconv_specs(self) -> list[L.MBConvSpec]:
        ins = (self.vit_stem_ch,) + self.mbconv_channels[:-1]
        return [L.MBConvSpec(i, o, 2, self.mbconv_expansion) for i, o in zip(ins, self.mbconv_channels)]

    @property
    def attention(self) -> L.AttentionSpec:
        return L.AttentionSpec(self.token_dim, self.heads, self.mlp_expansion)

    @property
    def token_grid(self) -> int:
        return self.input_hw // (2 * 2 ** len(self.mbconv_channels))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fire_stages"] = [[list(f) for f in st] for st in self.fire_stages]
        d["mbconv_channels"] = list(self.mbconv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in checkpoints."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: Tensor
    f_cnn: Tensor
    f_vit: Tensor
    alpha: Tensor
    fused: Tensor


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    freeze_alpha: bool = False  # ablation: gate output pinned at 0.5
    dtype: np.dtype = field(default=np.dtype(np.float32))

    @property
    def total_params(self) -> int:
        return count_params(self)

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise KeyError(f"state does not match model parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=t.dtype, copy=True)


# ------------------------------------------------------------------ build


def build_model(config: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialise every parameter from ``seed``."""
    config = config or ModelConfig()
    dt = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}

    def put(prefix, d):
        arrays.update(L.prefixed(prefix, d))

    c = config
    put("cnn.stem", L.conv_init(rng, 3, 3, c.input_ch, c.cnn_stem_ch, dt))
    in_ch = c.cnn_stem_ch
    for k, spec in enumerate(c.fire_specs):
        put(f"cnn.fire{k + 2}", L.fire_init(rng, in_ch, spec, dt))
        in_ch = spec.expand_total_ch
    put("cnn.proj", L.dense_init(rng, in_ch, c.fusion_dim, dt))

    put("vit.stem", L.conv_init(rng, 3, 3, c.input_ch, c.vit_stem_ch, dt))
    for k, spec in enumerate(c.mbconv_specs):
        put(f"vit.mbconv{k + 1}", L.mbconv_init(rng, spec, dt))
    put("vit.token_proj", L.dense_init(rng, c.mbconv_channels[-1], c.token_dim, dt))
    for k in range(c.depth):
        put(f"vit.encoder{k + 1}", L.encoder_init(rng, c.attention, dt))
    put("vit.proj", L.dense_init(rng, c.token_dim, c.fusion_dim, dt))

    put("gate.hidden", L.dense_init(rng, 2 * c.fusion_dim, c.gate_hidden, dt))
    put("gate.out", L.dense_init(rng, c.gate_hidden, c.fusion_dim, dt))

    put("head.norm", L.norm_init(c.fusion_dim, dt))
    put("head.hidden", L.dense_init(rng, c.fusion_dim, c.head_hidden, dt))
    put("head.out", L.dense_init(rng, c.head_hidden, c.num_classes, dt))

    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return Model(config, params, dtype=dt)


def count_params(model: Model) -> int:
    return int(sum(p.size for p in model.params.values()))


def analytic_param_count(config: ModelConfig) -> int:
    """Closed-form sum of per-layer parameter formulas."""
    c = config
    total = L.conv_param_count(3, 3, c.input_ch, c.cnn_stem_ch)
    in_ch = c.cnn_stem_ch
    for spec in c.fire_specs:
        total += L.fire_param_count(in_ch, spec)
        in_ch = spec.expand_total_ch
    total += L.dense_param_count(in_ch, c.fusion_dim)
    total += L.conv_param_count(3, 3, c.input_ch, c.vit_stem_ch)
    total += sum(L.mbconv_param_count(s) for s in c.mbconv_specs)
    total += L.dense_param_count(c.mbconv_channels[-1], c.token_dim)
    total += c.depth * L.encoder_param_count(c.attention)
    total += L.dense_param_count(c.token_dim, c.fusion_dim)
    total += L.dense_param_count(2 * c.fusion_dim, c.gate_hidden)
    total += L.dense_param_count(c.gate_hidden, c.fusion_dim)
    total += 2 * c.fusion_dim
    total += L.dense_param_count(c.fusion_dim, c.head_hidden)
    total += L.dense_param_count(c.head_hidden, c.num_classes)
    return total


# ---------------------------------------------------------------- forward


def _check_input(x: Tensor, config: ModelConfig):
    want = (config.input_hw, config.input_hw, config.input_ch)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"expected input N x {want[0]} x {want[1]} x {want[2]}, got {x.shape}")


def _note(trace, name, t):
    if trace is not None:
        trace.append((name, t.shape))
    return t


def cnn_branch(x: Tensor, model: Model, trace: list | None = None) -> Tensor:
    """stem(s2) -> [maxpool -> fire x k] per stage -> GAP -> dense + ReLU."""
    c, p = model.config, model.params
    _check_input(x, c)
    h = ops.relu(ops.conv2d(x, p["cnn.stem.kernel"], p["cnn.stem.bias"], 2, "same"))
    _note(trace, "cnn.stem", h)
    k = 2
    for stage, fires in enumerate(c.fire_stages):
        h = _note(trace, f"cnn.pool{stage + 1}", ops.maxpool2d(h, 2, 2))
        for s, e in fires:
            h = L.fire_forward(h, L.FireSpec(s, e), L.scope(p, f"cnn.fire{k}"))
            _note(trace, f"cnn.fire{k}", h)
            k += 1
    h = _note(trace, "cnn.gap", ops.global_avg_pool(h))
    return _note(trace, "cnn.proj", ops.relu(ops.dense(h, p["cnn.proj.weight"], p["cnn.proj.bias"])))


def vit_branch(x: Tensor, model: Model, trace: list | None = None) -> Tensor:
    """stem(s2) -> MBConv(s2) x 3 -> tokens -> encoders -> mean pool -> dense."""
    c, p = model.config, model.params
    _check_input(x, c)
    h = ops.swish(ops.conv2d(x, p["vit.stem.kernel"], p["vit.stem.bias"], 2, "same"))
    _note(trace, "vit.stem", h)
    for k, spec in enumerate(c.mbconv_specs):
        h = L.mbconv_forward(h, spec, L.scope(p, f"vit.mbconv{k + 1}"))
        _note(trace, f"vit.mbconv{k + 1}", h)
    n, gh, gw, ch = h.shape
    tokens = ops.reshape(h, (n, gh * gw, ch))
    tokens = ops.dense(tokens, p["vit.token_proj.weight"], p["vit.token_proj.bias"])
    _note(trace, "vit.token_proj", tokens)
    spec = c.attention
    for k in range(c.depth):
        tokens = L.transformer_encoder(tokens, spec, L.scope(p, f"vit.encoder{k + 1}"))
        _note(trace, f"vit.encoder{k + 1}", tokens)
    pooled = _note(trace, "vit.pool", ops.mean(tokens, axis=1))
    return _note(trace, "vit.proj", ops.dense(pooled, p["vit.proj.weight"], p["vit.proj.bias"]))


def gate_alpha(f_cnn: Tensor, f_vit: Tensor, params, dropout: float = 0.1,
               training: bool = False, rng=None, trace: list | None = None) -> Tensor:
    """sigmoid(Dense(ReLU-Dense(concat) -> dropout)) per sample and feature."""
    z = ops.concat([f_cnn, f_vit], axis=-1)
    h = ops.relu(ops.dense(z, params["gate.hidden.weight"], params["gate.hidden.bias"]))
    _note(trace, "gate.hidden", h)
    h = ops.dropout(h, dropout, rng, training)
    alpha = ops.sigmoid(ops.dense(h, params["gate.out.weight"], params["gate.out.bias"]))
    return _note(trace, "gate.out", alpha)


def aag_fuse(f_cnn: Tensor, f_vit: Tensor, params, dropout: float = 0.1, training: bool = False,
             rng=None, freeze_alpha: bool = False, trace: list | None = None):
    """Return ``(fused, alpha)`` with fused = alpha*f_cnn + (1-alpha)*f_vit."""
    if f_cnn.shape != f_vit.shape or f_cnn.ndim != 2:
        raise ShapeError(f"aag_fuse: branch embeddings differ: {f_cnn.shape} vs {f_vit.shape}")
    if freeze_alpha:
        alpha = Tensor(np.full(f_cnn.shape, 0.5, dtype=f_cnn.dtype))
    else:
        alpha = gate_alpha(f_cnn, f_vit, params, dropout, training, rng, trace)
    fused = ops.gated_fusion(alpha, f_cnn, f_vit)
    return _note(trace, "fused", fused), alpha


def classifier_head(fused: Tensor, model: Model, training: bool = False, rng=None,
                    trace: list | None = None) -> Tensor:
    c, p = model.config, model.params
    if fused.ndim != 2 or fused.shape[1] != c.fusion_dim:
        raise ShapeError(f"head: expected N x {c.fusion_dim}, got {fused.shape}")
    h = ops.layer_norm(fused, p["head.norm.gamma"], p["head.norm.beta"])
    _note(trace, "head.norm", h)
    h = ops.dropout(h, c.head_dropout1, rng, training)
    h = ops.relu(ops.dense(h, p["head.hidden.weight"], p["head.hidden.bias"]))
    _note(trace, "head.hidden", h)
    h = ops.dropout(h, c.head_dropout2, rng, training)
    return _note(trace, "head.out", ops.dense(h, p["head.out.weight"], p["head.out.bias"]))


def forward(model: Model, batch, training: bool = False, rng: np.random.Generator | None = None,
            trace: list | None = None) -> ForwardOutput:
    """Run both branches on the same batch, fuse, classify.

    ``rng`` drives dropout and is required when ``training`` is true.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.dtype != model.dtype:
        x = Tensor(x.data.astype(model.dtype))
    f_cnn = cnn_branch(x, model, trace)
    f_vit = vit_branch(x, model, trace)
    fused, alpha = aag_fuse(f_cnn, f_vit, model.params, model.config.gate_dropout, training, rng,
                            model.freeze_alpha, trace)
    logits = classifier_head(fused, model, training, rng, trace)
    probs = ops.softmax(logits, axis=-1)
    return ForwardOutput(logits, probs, f_cnn, f_vit, alpha, fused)


def predict_proba(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode class probabilities, batched."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(model, images[i:i + batch_size]).probs.data)
    return np.concatenate(out, axis=0)


def layer_summary(model: Model) -> list[tuple[str, tuple, int]]:
    """(layer name, output shape for batch 1, parameter count) per layer."""
    c = model.config
    trace: list = []
    forward(model, np.zeros((1, c.input_hw, c.input_hw, c.input_ch), dtype=model.dtype), trace=trace)
    rows = []
    for name, shape in trace:
        n = sum(t.size for k, t in model.params.items() if k.startswith(name + "."))
        rows.append((name, shape, int(n)))
    return rows
