"""``HCT1`` binary tensor container.

Layout: magic ``b"HCT1"``, u8 dtype code, u8 rank, ``rank`` little-endian u64
dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HCT1"

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
    np.dtype("u1"): 5,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class ContainerError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    le = np.dtype("u1") if arr.dtype.kind == "b" else arr.dtype.newbyteorder("<")
    code = DTYPE_CODES.get(le)
    if code is None:
        raise ContainerError(f"dtype {arr.dtype} has no container code")
    if arr.ndim > 255:
        raise ContainerError("rank above 255")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=le).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise ContainerError("not an HCT1 container (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in CODE_DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    dtype = CODE_DTYPES[code]
    start = 6 + 8 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = buf[start:]
    if len(payload) != n * dtype.itemsize:
        raise ContainerError(f"payload holds {len(payload)} bytes, expected {n * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
