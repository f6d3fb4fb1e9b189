"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6,
                   rtol: float = 1e-4) -> float:
    """max |a - n| / max(max |a|, max |n|, floor / rtol), over one tensor.

    The denominator floor makes an absolute difference below ``floor`` count
    as agreement at tolerance ``rtol``: tensors whose true gradient is zero
    would otherwise be judged on finite-difference roundoff alone.
    """
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0),
                floor / rtol)
    return float(diff / scale)


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``t.data``.

    When ``indices`` is given only those flat coordinates are perturbed; the
    rest of the returned array is NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare tape gradients with central differences for each tensor.

    ``fn`` must rebuild the scalar loss from the current tensor values each
    time it is called. With ``max_coords`` each tensor is checked on a
    random subset of that many coordinates. Returns name -> relative error.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    errors = {}
    for k, t in enumerate(tensors):
        analytic = grads.get(t, np.zeros_like(t.data))
        if max_coords is not None and t.size > max_coords:
            idx = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = numeric_grad(fn, t, h, idx)
        a = analytic.reshape(-1)[idx]
        n = numeric.reshape(-1)[idx]
        errors[t.name or f"t{k}"] = relative_error(a, n)
    return errors
