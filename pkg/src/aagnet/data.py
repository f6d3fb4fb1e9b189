"""Class-folder image ingestion, resizing, normalisation, augmentation and
batching.

Expected layout: ``<root>/<split>/<class_name>/*.{png,jpg,jpeg,nt}``. Class
indices follow the lexicographic order of the class directory names.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .checkpoint import load_raw_tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".nt")


class DatasetError(ValueError):
    """Dataset root/split is missing, empty or unreadable."""


@dataclass
class DatasetSplit:
    images: np.ndarray  # N x H x W x 3 float32 in [0, 1]
    labels: np.ndarray  # N int64
    class_names: list[str]
    skipped: int = 0
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("labels reference classes outside class_names")

    def __len__(self):
        return len(self.labels)

    @property
    def counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()

    def subset(self, idx) -> DatasetSplit:
        idx = np.asarray(idx, dtype=np.int64)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return DatasetSplit(self.images[idx], self.labels[idx], list(self.class_names), 0, paths)


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    rotation_factor: float = 0.05  # fraction of a full turn
    zoom_factor: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation_factor", "zoom_factor"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


# ---------------------------------------------------------------- pixels


def normalize(img_u8: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0, 1] (v / 255)."""
    return np.asarray(img_u8).astype(np.float32) / np.float32(255.0)


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int = 128, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize with half-pixel centres (corners not aligned)."""
    out_w = out_h if out_w is None else out_w
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if h < 1 or w < 1 or out_h < 1 or out_w < 1:
        raise ValueError(f"cannot resize {img.shape} to {out_h}x{out_w}")
    src = img.astype(np.float64)
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None, None]
    rows = src[y0] + (src[y1] - src[y0]) * fy
    fx = fx[None, :, None]
    out = rows[:, x0] + (rows[:, x1] - rows[:, x0]) * fx
    return out.astype(np.float32)


# ----------------------------------------------------------------- loading


def _decode(path: Path) -> np.ndarray:
    """Return an H x W x 3 float32 array on the 0..255 scale."""
    if path.suffix.lower() == ".nt":
        arr = load_raw_tensor(path)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"raw tensor must be HxW, HxWx1 or HxWx3, got {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
            raise ValueError("raw tensor values must lie in [0, 1]")
        arr = arr * np.float32(255.0)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def _load_image(path: Path, size: int) -> np.ndarray:
    arr = _decode(path)
    if arr.shape[:2] != (size, size):
        arr = resize_bilinear(arr, size, size)
    return np.clip(arr / np.float32(255.0), 0.0, 1.0).astype(np.float32)


def load_dataset(root, split: str, image_size: int = 128, workers: int = 1) -> DatasetSplit:
    """Load ``root/split``; unreadable images are skipped and counted."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a readable directory")
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing split directory {split_dir}")
    class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class directories under {split_dir}")

    files: list[tuple[Path, int]] = []
    for label, d in enumerate(class_dirs):
        found = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            warnings.warn(f"class directory {d} contains no images", stacklevel=2)
        files.extend((p, label) for p in found)

    def load(item):
        path, _ = item
        try:
            return _load_image(path, image_size)
        except Exception as e:  # corrupt file: report and skip
            log.warning("skipping unreadable image %s: %s", path, e)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            decoded = list(pool.map(load, files))
    else:
        decoded = [load(f) for f in files]

    keep = [i for i, a in enumerate(decoded) if a is not None]
    skipped = len(files) - len(keep)
    if skipped:
        warnings.warn(f"skipped {skipped} unreadable image(s) in {split_dir}", stacklevel=2)
    if keep:
        images = np.stack([decoded[i] for i in keep])
    else:
        images = np.zeros((0, image_size, image_size, 3), dtype=np.float32)
    labels = np.array([files[i][1] for i in keep], dtype=np.int64)
    return DatasetSplit(images, labels, [d.name for d in class_dirs], skipped,
                        [str(files[i][0]) for i in keep])


def holdout_split(split: DatasetSplit, fraction: float = 0.1, seed: int = 0):
    """Seeded (train, validation) partition holding out ``fraction`` of samples."""
    n = len(split)
    if n < 2:
        raise DatasetError("need at least two samples to hold out a validation set")
    n_val = min(n - 1, max(1, int(round(n * fraction))))
    perm = np.random.default_rng(seed).permutation(n)
    return split.subset(np.sort(perm[n_val:])), split.subset(np.sort(perm[:n_val]))


# ------------------------------------------------------------ augmentation


def _reflect(coord: np.ndarray, n: int) -> np.ndarray:
    # mirror about the outer pixel edges: (d c b a | a b c d | d c b a)
    t = np.mod(coord + 0.5, 2 * n)
    t = np.where(t >= n, 2 * n - t, t)
    return np.clip(t - 0.5, 0.0, n - 1)


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def rotate_zoom(img: np.ndarray, angle: float, zoom: float) -> np.ndarray:
    """Rotate by ``angle`` radians and scale by ``zoom`` about the centre,
    bilinear resampling with reflected borders. zoom > 1 magnifies."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    src_x = (c * xx + s * yy) / zoom + cx
    src_y = (-s * xx + c * yy) / zoom + cy
    out = _sample_bilinear(img.astype(np.float64), _reflect(src_y, h), _reflect(src_x, w))
    return np.clip(out, img.min(), img.max()).astype(img.dtype)


def augment(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-sample random horizontal flip, rotation and zoom.

    Draw order per sample is fixed (flip, angle, zoom) so a seeded ``rng``
    replays bit-identically.
    """
    out = np.empty_like(images)
    max_angle = config.rotation_factor * 2 * math.pi
    for i, img in enumerate(images):
        flip = rng.random() < 0.5
        angle = rng.uniform(-max_angle, max_angle)
        zoom = 1.0 + rng.uniform(-config.zoom_factor, config.zoom_factor)
        if config.hflip and flip:
            img = img[:, ::-1]
        if angle != 0.0 or zoom != 1.0:
            img = rotate_zoom(img, angle, zoom)
        out[i] = img
    return out


# ---------------------------------------------------------------- batching


def shuffle_and_batch(split: DatasetSplit, batch_size: int = 20, seed: int | None = 0,
                      shuffle: bool = True) -> list[Batch]:
    """Permute (image, label) pairs together and cut into batches; the last
    partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if n == 0:
        raise DatasetError("cannot batch an empty split")
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [Batch(split.images[idx], split.labels[idx], idx)
            for idx in (order[i:i + batch_size] for i in range(0, n, batch_size))]


def iter_batches(images: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for i in range(0, len(images), batch_size):
        yield images[i:i + batch_size]
