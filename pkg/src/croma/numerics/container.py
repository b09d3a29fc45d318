"""CRMA binary tensor container.

Layout (little-endian): b"CRMA", u32 version (1), u32 dtype code (0 = f64),
u32 ndim, ndim x u64 extents, row-major f64 payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CRMA"
VERSION = 1
DTYPE_F64 = 0


class ContainerError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack("<III", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise ContainerError("not a CRMA container (bad magic)")
    version, dtype, ndim = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported CRMA version {version}")
    if dtype != DTYPE_F64:
        raise ContainerError(f"unsupported dtype code {dtype}")
    offset = 16 + 8 * ndim
    if len(buf) < offset:
        raise ContainerError("truncated CRMA header")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 16)
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) != offset + 8 * count:
        raise ContainerError(f"payload size mismatch for shape {shape}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return arr.astype(np.float64).reshape(shape)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
