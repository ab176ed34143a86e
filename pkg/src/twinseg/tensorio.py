"""Binary tensor serialization: header (magic, dtype code, rank, extents) + raw little-endian values."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import UsageError

TENSOR_MAGIC = b"TNSR"

_DTYPE_CODES = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("uint8"): 2,
    np.dtype("int32"): 3,
    np.dtype("int64"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise UsageError(f"unsupported dtype for serialization: {arr.dtype}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise UsageError(f"bad tensor magic {magic!r}")
    code, rank = struct.unpack("<BB", fh.read(2))
    if code not in _CODE_DTYPES:
        raise UsageError(f"unknown dtype code {code}")
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise UsageError("truncated tensor record")
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(shape)


def write_named_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    write_tensor(fh, arr)


def read_named_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", fh.read(2))
    name = fh.read(n).decode("utf-8")
    return name, read_tensor(fh)
