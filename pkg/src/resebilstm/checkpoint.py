"""Flat binary container for named float64 arrays.

Layout (all integers unsigned 64-bit little-endian)::

    b"RESEB1"
    repeated until EOF:
        name length | name bytes (utf-8) | rank | extents... | values (float64 LE)

Used for parameter checkpoints and for the sample matrices of cohort archives.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"RESEB1"
_U64 = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim > 3:
            raise CheckpointError(f"{name}: rank {arr.ndim} > 3")
        raw = name.encode("utf-8")
        parts.append(_U64.pack(len(raw)))
        parts.append(raw)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(n) for n in arr.shape)
        parts.append(np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes; not a RESEB1 container")
    pos = len(MAGIC)
    out: Dict[str, np.ndarray] = OrderedDict()

    def u64():
        nonlocal pos
        if pos + 8 > len(blob):
            raise CheckpointError("truncated container")
        (v,) = _U64.unpack_from(blob, pos)
        pos += 8
        return v

    while pos < len(blob):
        n = u64()
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        rank = u64()
        if rank > 3:
            raise CheckpointError(f"{name}: rank {rank} > 3")
        shape = tuple(u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{name}: truncated values")
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
    return out


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(arrays))


def load(path) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
