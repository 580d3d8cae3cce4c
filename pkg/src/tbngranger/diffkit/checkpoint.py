"""Versioned little-endian checkpoint of named float64 matrices.

Layout::

    b"DKCK" u32 version u32 count
    count x (u32 name_len, name utf-8, u64 rows, u64 cols, rows*cols float64)

Arrays with other ranks are stored with ``cols`` equal to their last axis
(scalars and vectors as a single row); the reader returns 2-D arrays and
:meth:`ParamStore.load_state` reshapes them to the slot shape.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"DKCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: "dict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a, dtype=np.float64)
        cols = a.shape[-1] if a.ndim >= 1 else 1
        rows = a.size // cols if cols else 0
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<QQ", rows, cols))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            rows, cols = struct.unpack_from("<QQ", data, pos)
            pos += 16
            size = rows * cols
            if pos + 8 * size > len(data):
                raise CheckpointError(f"entry {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(rows, cols)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(arrays, path) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
