"""Binary checkpoint container shared by encoders, mapping matrices and heads.

Layout (all integers little-endian)::

    magic      8 bytes   b"XALNCKPT"
    version    u32       currently 1
    count      u32       number of entries
    entry*:
      name_len u16, name (UTF-8, name_len bytes)
      ndim     u8,  dims (u32 × ndim)
      data     float64 little-endian, row-major, prod(dims) values

Entries are written in lexicographic name order so equal contents give
byte-identical files.
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import ParseError

MAGIC = b"XALNCKPT"
VERSION = 1


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")  # keeps 0-d shape; tobytes is C order
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"entry {name!r} too large for container")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise ParseError("not a checkpoint container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise ParseError(f"unsupported container version {version}")
        pos = 16
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(blob):
                raise ParseError(f"truncated data for entry {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise ParseError(f"truncated container: {exc}") from None
    if pos != len(blob):
        raise ParseError("trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
