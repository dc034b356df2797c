"""Binary checkpoint container.

Layout (little-endian)::

    b"BTLR"  u32 version  32-byte sha256 of the config text
    u32 len + config text (flat ``key = value`` lines, UTF-8)
    u32 len + meta JSON (seed, step, kind, ...)
    u32 record count
    records: u16 name len, name, u8 rank, rank x u64 dims, f32 payload
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"BTLR"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class Checkpoint:
    config_text: str
    meta: dict
    params: dict[str, np.ndarray]

    @property
    def digest(self) -> bytes:
        return config_digest(self.config_text)


def config_digest(config_text: str) -> bytes:
    return hashlib.sha256(config_text.encode("utf-8")).digest()


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    cfg = ckpt.config_text.encode("utf-8")
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(config_digest(ckpt.config_text))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(field, f"truncated at byte {self.pos}, need {n} more")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def decode(data: bytes, expected_digest: bytes | None = None) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("magic", "not a BTLR checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError("version", f"unsupported version {version}")
    digest = r.take(32, "digest")
    (n_cfg,) = r.unpack("<I", "config")
    config_text = r.take(n_cfg, "config").decode("utf-8")
    if config_digest(config_text) != digest:
        raise CheckpointFormatError("digest", "stored digest does not match the embedded config")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointFormatError("digest", "checkpoint was written for a different config")
    (n_meta,) = r.unpack("<I", "meta")
    meta = json.loads(r.take(n_meta, "meta").decode("utf-8"))
    (count,) = r.unpack("<I", "records")
    params: dict[str, np.ndarray] = {}
    for i in range(count):
        field = f"record[{i}]"
        (n_name,) = r.unpack("<H", field)
        name = r.take(n_name, field).decode("utf-8")
        (rank,) = r.unpack("<B", field)
        dims = r.unpack(f"<{rank}Q", field)
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * size, f"record[{name}]")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(data):
        raise CheckpointFormatError("trailer", f"{len(data) - r.pos} unexpected trailing bytes")
    return Checkpoint(config_text, meta, params)


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], config_text: str, meta: dict) -> bytes:
    data = encode(Checkpoint(config_text, meta, dict(params)))
    atomic_write(path, data)
    return data


def load_checkpoint(path: str | Path, expected_digest: bytes | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_digest)
