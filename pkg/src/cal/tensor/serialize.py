"""Flat binary tensor format.

Layout (all little-endian)::

    b"CALT" | version: u8 | rank: u8 | dims: rank x u64 | data: prod(dims) x f64

Data is row-major. A rank-0 tensor holds exactly one value.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .core import Tensor

MAGIC = b"CALT"
VERSION = 1


class FormatError(ValueError):
    """Raised for corrupt or truncated binary data; carries the byte offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote rank 0
    if arr.ndim > 255:
        raise ValueError("rank above 255 is not representable")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes()


def tensor_to_bytes(t: Tensor) -> bytes:
    return encode_array(t.data)


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record starting at ``offset``; return (array, next offset)."""
    end = len(buf)
    if offset + 6 > end:
        raise FormatError("truncated tensor header", offset)
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}", offset)
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset + 4)
    pos = offset + 6
    if pos + 8 * rank > end:
        raise FormatError("truncated tensor dims", pos)
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if count < 1:
        raise FormatError(f"zero-sized dimension in {dims}", offset + 6)
    nbytes = 8 * count
    if pos + nbytes > end:
        raise FormatError(f"truncated tensor data: need {nbytes} bytes, have {end - pos}", pos)
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
    return arr, pos + nbytes


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    arr, pos = decode_array(buf, offset)
    return Tensor._wrap(arr), pos


def save_tensor(t: Tensor, f: BinaryIO) -> None:
    f.write(tensor_to_bytes(t))


def load_tensor(f: BinaryIO) -> Tensor:
    buf = f.read()
    t, pos = tensor_from_bytes(buf)
    if pos != len(buf):
        raise FormatError("trailing bytes after tensor", pos)
    return t
