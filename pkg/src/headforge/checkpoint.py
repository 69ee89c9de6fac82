"""Versioned binary container for parameters and run state.

Layout: magic "HSCK", format version (u32 LE), blob count (u32 LE), then per
blob: name length (u16) + name (utf-8), kind (u8: 0=f32, 1=i64, 2=bytes,
3=f64), for arrays ndim (u8) + shape (u32 each), payload length (u64) +
payload. A sha256 over everything preceding it terminates the file.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointIntegrityError, CheckpointVersionError

MAGIC = b"HSCK"
FORMAT_VERSION = 1

_KIND_F32, _KIND_I64, _KIND_BYTES, _KIND_F64 = 0, 1, 2, 3
_DTYPES = {_KIND_F32: "<f4", _KIND_I64: "<i8", _KIND_F64: "<f8"}


def _encode_blob(name: str, value) -> bytes:
    head = struct.pack("<H", len(name.encode())) + name.encode()
    if isinstance(value, (bytes, bytearray)):
        return head + struct.pack("<B", _KIND_BYTES) + struct.pack("<Q", len(value)) + bytes(value)
    arr = np.asarray(value)
    if arr.dtype == np.float64:
        kind = _KIND_F64
    elif np.issubdtype(arr.dtype, np.integer):
        kind, arr = _KIND_I64, arr.astype(np.int64)
    else:
        kind, arr = _KIND_F32, arr.astype(np.float32)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
    shape = struct.pack("<B", arr.ndim) + b"".join(struct.pack("<I", s) for s in arr.shape)
    return head + struct.pack("<B", kind) + shape + struct.pack("<Q", len(payload)) + payload


def save_container(path: str | Path, blobs: dict) -> None:
    """Atomic write (temp file + rename) of named blobs."""
    path = Path(path)
    body = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(blobs))
    for name, value in blobs.items():
        body += _encode_blob(name, value)
    body += hashlib.sha256(body).digest()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)


def load_container(path: str | Path) -> dict:
    path = Path(path)
    data = open(path, "rb").read()
    if len(data) < 44 or data[:4] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")
    version = struct.unpack_from("<I", body, 4)[0]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    count = struct.unpack_from("<I", body, 8)[0]

    blobs = {}
    offset = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset : offset + name_len].decode()
        offset += name_len
        (kind,) = struct.unpack_from("<B", body, offset)
        offset += 1
        if kind == _KIND_BYTES:
            (size,) = struct.unpack_from("<Q", body, offset)
            offset += 8
            blobs[name] = body[offset : offset + size]
            offset += size
        else:
            (ndim,) = struct.unpack_from("<B", body, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", body, offset) if ndim else ()
            offset += 4 * ndim
            (size,) = struct.unpack_from("<Q", body, offset)
            offset += 8
            blobs[name] = np.frombuffer(body[offset : offset + size], dtype=_DTYPES[kind]).reshape(shape).copy()
            offset += size
    return blobs
