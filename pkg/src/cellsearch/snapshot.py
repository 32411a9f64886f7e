"""Binary snapshots of architecture tables.

Layout: a 16-byte header (magic ``CSNP``, u16 version, u16 rank, four u16
extents), the little-endian float64 payload, then a u32 CRC-32 over both.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CSNP"
VERSION = 1
_HEADER = struct.Struct("<4sHH4H")


class SnapshotError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype="<f8")
    if a.ndim > 4 or any(d > 0xFFFF for d in a.shape):
        raise SnapshotError(f"shape {a.shape} does not fit the snapshot header")
    dims = list(a.shape) + [0] * (4 - a.ndim)
    body = _HEADER.pack(MAGIC, VERSION, a.ndim, *dims) + a.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size + 4:
        raise SnapshotError("snapshot truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise SnapshotError("snapshot checksum mismatch")
    magic, version, ndim, *dims = _HEADER.unpack(body[: _HEADER.size])
    if magic != MAGIC or version != VERSION or ndim > 4:
        raise SnapshotError(f"not a version-{VERSION} snapshot")
    shape = tuple(dims[:ndim])
    payload = body[_HEADER.size :]
    if len(payload) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise SnapshotError("snapshot payload does not match its shape")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
