"""Synthetic class-folder corpora for tests, demos and overfit checks.

Class ``k`` is an oriented texture with random phase over uniform noise:
horizontal stripes, vertical stripes, checkerboard, diagonal stripes (then
repeating with a different period). Both branches pool away spatial position
(global average pooling, token mean pooling), so classes are keyed by local
texture rather than layout.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .checkpoint import save_raw_tensor


def synthetic_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    period = 4 + 2 * (label // 4)
    half = period // 2
    r = np.arange(size)[:, None] + rng.integers(period)
    c = np.arange(size)[None, :] + rng.integers(period)
    kind = label % 4
    if kind == 0:
        on = (r // half) % 2 == 0
    elif kind == 1:
        on = (c // half) % 2 == 0
    elif kind == 2:
        on = ((r // half) + (c // half)) % 2 == 0
    else:
        on = ((r + c) // half) % 2 == 0
    on = np.broadcast_to(on, (size, size))
    img = np.where(on, 0.8, 0.2) + rng.uniform(-0.15, 0.15, size=(size, size))
    return np.repeat(np.clip(img, 0.0, 1.0).astype(np.float32)[:, :, None], 3, axis=2)


def synthetic_split(n_per_class, size: int = 16, seed: int = 0):
    """In-memory images (N x size x size x 3, float32) and int labels.

    ``n_per_class`` is a list of per-class sample counts.
    """
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, k, dtype=np.int64) for k, n in enumerate(n_per_class)])
    images = np.stack([synthetic_image(int(k), size, rng) for k in labels])
    return images, labels


def write_corpus(root, manifest: dict, size: int = 32, seed: int = 0, fmt: str = "png") -> dict:
    """Write ``manifest = {split: {class_name: count}}`` under ``root``.

    Returns the manifest. ``fmt`` is ``png`` or ``nt`` (raw float tensors).
    """
    from PIL import Image

    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, classes in manifest.items():
        for label, name in enumerate(sorted(classes)):
            d = root / split / name
            d.mkdir(parents=True, exist_ok=True)
            for i in range(classes[name]):
                img = synthetic_image(label, size, rng)
                if fmt == "nt":
                    save_raw_tensor(d / f"{i:04d}.nt", img[:, :, 0])
                else:
                    u8 = np.rint(img[:, :, 0] * 255).astype(np.uint8)
                    Image.fromarray(u8).save(d / f"{i:04d}.png")
    return manifest
