"""Versioned binary container: a JSON manifest followed by named little-endian arrays.

Layout::

    magic (8 bytes) | u32 version | u64 manifest length | manifest (UTF-8 JSON, sorted keys)
    u32 blob count | per blob: u16 name length, name, u8 dtype code, u8 ndim, ndim x u64 dims, data

All integers are little-endian; blobs are float32 or int32 little-endian, so the
bytes do not depend on the host platform.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

VERSION = 1
CHECKPOINT_MAGIC = b"SHTRCKPT"
TOKENS_MAGIC = b"SHTRTOKS"

_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_LOOKUP = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}


class ContainerError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.floating):
        return np.ascontiguousarray(arr, dtype="<f4")
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        return np.ascontiguousarray(arr, dtype="<i4")
    raise ContainerError(f"unsupported array dtype {arr.dtype}")


def encode(magic: bytes, manifest: Mapping, blobs: Mapping[str, np.ndarray]) -> bytes:
    parts = [magic, struct.pack("<I", VERSION)]
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = _canonical(arr)
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", _LOOKUP[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(magic: bytes, payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if payload[:8] != magic:
        raise ContainerError(f"bad magic {payload[:8]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<I", payload, 8)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (mlen,) = struct.unpack_from("<Q", payload, 12)
    pos = 20
    manifest = json.loads(payload[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    (count,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    blobs = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos : pos + klen].decode("utf-8")
        pos += klen
        code, ndim = struct.unpack_from("<BB", payload, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
        pos += 8 * ndim
        dtype = _CODES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        blobs[name] = np.frombuffer(payload[pos : pos + size], dtype=dtype).reshape(shape).copy()
        pos += size
    if pos != len(payload):
        raise ContainerError("trailing bytes after last blob")
    return manifest, blobs


def save(path, magic: bytes, manifest: Mapping, blobs: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(magic, manifest, blobs))


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(magic, Path(path).read_bytes())
