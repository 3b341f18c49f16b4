"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"ALRCKPT\\0"
    version    uint32
    hdr_len    uint64
    header     hdr_len bytes of UTF-8 JSON:
                 {"tensors": [{"name", "shape", "dtype"}...], "meta": {...}}
    payload    tensors in header order, C-contiguous, '<f8' or '<i8'
    crc32      uint32 over every preceding byte

Nothing is returned unless the checksum verifies, so a corrupted file never
yields a partial load.
"""

from __future__ import annotations

import io
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, CheckpointError, VersionMismatchError

MAGIC = b"ALRCKPT\0"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8"), "b1": np.dtype("|b1")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in "iu":
        return "i8"
    if arr.dtype.kind == "b":
        return "b1"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    names = sorted(tensors)
    specs = []
    payload = io.BytesIO()
    for name in names:
        arr = np.asarray(tensors[name])
        tag = _dtype_tag(arr)
        specs.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        payload.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    header = json.dumps({"tensors": specs, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + payload.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> tuple[dict, dict]:
    if len(blob) < len(MAGIC) + 16 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint checksum mismatch")
    version, hdr_len = struct.unpack("<IQ", body[len(MAGIC):len(MAGIC) + 12])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hdr_len].decode("utf-8"))
    offset = start + hdr_len
    tensors = {}
    for spec in header["tensors"]:
        dt = _DTYPES[spec["dtype"]]
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[spec["name"]] = np.frombuffer(body[offset:offset + n], dtype=dt).reshape(shape).copy()
        offset += n
    if offset != len(body):
        raise CheckpointError("trailing bytes in checkpoint payload")
    return tensors, header["meta"]


def save(path: str | os.PathLike, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors, meta))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict, dict]:
    return loads(Path(path).read_bytes())
