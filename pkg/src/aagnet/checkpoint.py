"""Binary checkpoint and raw-tensor file formats.

Checkpoint layout (all integers little-endian)::

    b"AAGN" | version u32 | config digest (32 bytes, SHA-256) |
    repeated { name_len u32 | name utf-8 | rank u32 | dims u64 * rank | f32 payload }

Records run to end of file. A ``.nt`` raw tensor is a single record body
without the name: ``rank u32 | dims u64 * rank | f32 payload``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, build_model

MAGIC = b"AAGN"
VERSION = 1
DIGEST_LEN = 32


class CheckpointError(ValueError):
    pass


def _write_array(buf, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(buf, n: int, what: str) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError(f"truncated file while reading {what}")
    return b


def _read_array(buf) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(buf, 4, "rank"))
    if rank > 16:
        raise CheckpointError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank, "dims")) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(buf, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_checkpoint(model: Model, path) -> None:
    """Write every parameter as float32. Writes go to a temp file first so a
    crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(model.config.digest())
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        _write_array(buf, t.data)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Return ``(config digest, name -> float32 array)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = _read_exact(buf, DIGEST_LEN, "config digest")
    tensors: dict[str, np.ndarray] = {}
    while buf.tell() < len(data):
        (n,) = struct.unpack("<I", _read_exact(buf, 4, "name length"))
        try:
            name = _read_exact(buf, n, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("corrupt parameter name") from e
        if name in tensors:
            raise CheckpointError(f"duplicate parameter {name!r}")
        tensors[name] = _read_array(buf)
    return digest, tensors


def load_checkpoint(path, config: ModelConfig) -> Model:
    """Rebuild a float32 model for ``config`` and fill it from ``path``."""
    digest, tensors = read_checkpoint(path)
    if digest != config.digest():
        raise CheckpointError("checkpoint was written for a different model configuration")
    model = build_model(config, seed=0)
    try:
        model.load_state(tensors)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from e
    return model


def config_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_sidecar(path, config: ModelConfig, class_names=None) -> None:
    """Config JSON next to the checkpoint so evaluation can rebuild the model."""
    meta = {"config": config.to_dict(), "class_names": list(class_names or [])}
    config_sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_sidecar(path) -> tuple[ModelConfig, list[str]]:
    p = config_sidecar(path)
    try:
        meta = json.loads(p.read_text())
        return ModelConfig.from_dict(meta["config"]), list(meta.get("class_names", []))
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read model config sidecar {p}: {e}") from e


def save_raw_tensor(path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    _write_array(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_raw_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    arr = _read_array(buf)
    if buf.tell() != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor payload")
    return arr
