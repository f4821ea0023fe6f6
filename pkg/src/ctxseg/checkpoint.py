"""Flat binary checkpoint archive.

Layout (all integers little-endian)::

    magic      8 bytes   b"CTXSEGCK"
    version    uint32    1
    meta_len   uint32    length of the UTF-8 JSON metadata blob
    meta       bytes     JSON object (model config etc.), may be "{}"
    count      uint32    number of tensors
    count x header entry:
        name_len  uint16
        name      UTF-8 bytes
        dtype     1 byte   b"f" = float32, b"d" = float64
        ndim      uint8
        dims      ndim x uint32
    payloads   raw little-endian scalars, one per entry in header order,
               row-major, no padding between payloads

Writing then reading a checkpoint reproduces every array bit for bit.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"CTXSEGCK"
VERSION = 1
_DTYPES = {b"f": np.dtype("<f4"), b"d": np.dtype("<f8")}
_CODES = {np.dtype("float32"): b"f", np.dtype("float64"): b"d"}


def dumps(arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    header = [MAGIC, struct.pack("<II", VERSION, len(meta_blob)), meta_blob,
              struct.pack("<I", len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise DataError(f"unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nb)) + nb + code + struct.pack("<B", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(header + payload)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise DataError("not a checkpoint: bad magic")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 16
        meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            code = blob[off:off + 1]
            (ndim,) = struct.unpack_from("<B", blob, off + 1)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            entries.append((name, _DTYPES[code], dims))
        arrays = {}
        for name, dt, dims in entries:
            n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + n > len(blob):
                raise DataError(f"truncated payload for {name!r}")
            arrays[name] = np.frombuffer(blob[off:off + n], dtype=dt).reshape(dims).copy()
            off += n
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from exc
    return arrays, meta


def save(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None):
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
