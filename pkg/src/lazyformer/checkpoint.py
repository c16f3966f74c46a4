"""Versioned little-endian binary checkpoints.

Layout::

    b"LZYF" | u32 version | u32 config_len | config JSON (utf-8)
    | u32 tensor_count
    | per tensor: u32 name_len | name | u32 rank | rank * u32 dims | f64 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import LazyFormer, ModelConfig

MAGIC = b"LZYF"
FORMAT_VERSION = 1


def save_checkpoint(model: LazyFormer) -> bytes:
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    params = model.named_parameters()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config)), config, struct.pack("<I", len(params))]
    for name, t in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(buf: bytes) -> LazyFormer:
    reader = _Reader(buf)
    if bytes(reader.take(4)) != MAGIC:
        raise CheckpointError("not a lazyformer checkpoint (bad magic header)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(json.loads(bytes(reader.take(reader.u32())).decode("utf-8")))
    except (ValueError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    model = LazyFormer(config)
    expected = model.named_parameters()
    count = reader.u32()
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} tensors, config implies {len(expected)}")
    for want_name, t in expected:
        name = bytes(reader.take(reader.u32())).decode("utf-8", errors="replace")
        rank = reader.u32()
        dims = tuple(struct.unpack(f"<{rank}I", reader.take(4 * rank)))
        if name != want_name or dims != t.shape:
            raise CheckpointError(f"tensor mismatch: found {name} {dims}, expected {want_name} {t.shape}")
        payload = np.frombuffer(reader.take(8 * t.size), dtype="<f8")
        t.data[...] = payload.reshape(dims)
    if reader.pos != len(reader.buf):
        raise CheckpointError(f"{len(reader.buf) - reader.pos} trailing bytes after last tensor")
    return model


def write_checkpoint(model: LazyFormer, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(save_checkpoint(model))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> LazyFormer:
    return load_checkpoint(Path(path).read_bytes())
