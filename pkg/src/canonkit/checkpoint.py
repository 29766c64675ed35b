"""Versioned binary checkpoint container.

Layout (integers little-endian)::

    b"CANONKIT"            8 bytes magic
    version                u32
    body length            u64
    sha256(body)           32 bytes
    body:
        config length      u32, then UTF-8 JSON (sorted keys)
        tensor count       u32
        per tensor: name length u16, UTF-8 name, ndim u8, dims u32 x ndim,
                    float64 payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from canonkit.errors import (
    CheckpointDigestError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from canonkit.tensor import Tensor

MAGIC = b"CANONKIT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


def _encode_body(tensors: Mapping[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(tensors: Mapping[str, np.ndarray | Tensor], config: dict, path) -> Path:
    body = _encode_body(tensors, config)
    path = Path(path)
    path.write_bytes(_HEADER.pack(MAGIC, VERSION, len(body), hashlib.sha256(body).digest()) + body)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError("checkpoint body ends early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, config)``; raises a ``CheckpointError`` subclass on any defect."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a canonkit checkpoint (bad magic)")
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    _, version, body_len, digest = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
    body = raw[_HEADER.size:]
    if len(body) < body_len:
        raise CheckpointTruncatedError(f"{path}: expected {body_len} body bytes, found {len(body)}")
    if len(body) > body_len:
        raise CheckpointFormatError(f"{path}: {len(body) - body_len} trailing bytes")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointDigestError(f"{path}: digest mismatch, file is corrupted")
    rd = _Reader(body)
    (clen,) = rd.unpack("<I")
    config = json.loads(rd.take(clen).decode("utf-8"))
    (count,) = rd.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if rd.pos != len(body):
        raise CheckpointFormatError(f"{path}: unparsed bytes after tensor table")
    return tensors, config
