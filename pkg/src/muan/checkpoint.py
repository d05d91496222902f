"""Binary checkpoint serialisation.

Layout, all little-endian:

    magic b"MUAN" | u16 format version | u32 config length | config JSON (UTF-8)
    | u32 tensor count | tensor records

    record: u16 name length | name (UTF-8) | u8 rank | u32 extent per axis
            | row-major float32 payload

Parameters are held in float64 in memory but stored as float32.  Loading a
checkpoint therefore rounds every weight once; saving the loaded model again
reproduces the file byte for byte (float32 round-trips through float64
exactly), which is what the determinism checks compare.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, MuanModel
from .tensor import RngStream

MAGIC = b"MUAN"
FORMAT_VERSION = 1


def config_json_bytes(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: MuanModel) -> bytes:
    """Serialise without touching the filesystem (used for byte comparisons)."""
    cfg = config_json_bytes(model.config)
    params = list(model.parameters())
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, tensor in params:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        arr = np.ascontiguousarray(tensor.data, dtype=np.float64)
        if arr.ndim > 0xFF:
            raise CheckpointError(f"parameter {name} has rank {arr.ndim}, limit 255")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: MuanModel, path) -> None:
    """Atomic write: the file is either absent or complete."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, origin: str):
        self.blob = blob
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.origin}: truncated at byte {self.pos}, wanted {n} more"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parse a checkpoint into its config and float32 tensor table."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (cfg_len,) = r.unpack("<I")
    try:
        raw_cfg = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: config block is not valid JSON: {exc}") from None
    config = ModelConfig.from_dict(raw_cfg)
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(4 * n_items)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    return config, tensors


def load_checkpoint(path) -> MuanModel:
    """Rebuild a model from a checkpoint; every parameter must be present."""
    config, tensors = read_checkpoint(path)
    model = MuanModel(config, RngStream(0))
    seen = set()
    for name, tensor in model.parameters():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        stored = tensors[name]
        if stored.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {stored.shape}, model wants {tensor.data.shape}"
            )
        tensor.data = stored.astype(np.float64)
        tensor.grad = None
        seen.add(name)
    extra = set(tensors) - seen
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)[:5]}")
    return model
