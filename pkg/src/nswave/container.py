"""NSTF1 named-tensor container.

Layout (all integers little-endian unsigned 64-bit):

    magic  b"NSTF1\\0"
    count
    repeat count times:
        name_len, name (utf-8), rank, dims[rank], data (f64 LE, C order)

Entries are written in dict insertion order, so identical inputs produce
bit-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"NSTF1\x00"
_U64 = struct.Struct("<Q")


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += _U64.pack(len(tensors))
    for name, arr in tensors.items():
        data = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d ranks
        raw = name.encode("utf-8")
        buf += _U64.pack(len(raw))
        buf += raw
        buf += _U64.pack(data.ndim)
        for d in data.shape:
            buf += _U64.pack(d)
        buf += data.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: bad magic, not an NSTF1 file")
    pos = len(MAGIC)

    def u64() -> int:
        nonlocal pos
        val = _U64.unpack_from(raw, pos)[0]
        pos += 8
        return val

    count = u64()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = u64()
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = u64()
        dims = tuple(u64() for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos)
        pos += 8 * size
        out[name] = arr.reshape(dims).astype(float)
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
