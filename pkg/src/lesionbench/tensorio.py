"""TEN1 tensor files.

Layout: the 4-byte magic ``TEN1``, one unsigned byte holding the rank, one
little-endian ``uint32`` per dimension, then the row-major payload as
little-endian ``float32`` or ``uint8``.  The element type is not stored; it
is recovered from the payload length.
"""
from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"TEN1"
_DTYPES = {np.dtype(np.float32): "<f4", np.dtype(np.uint8): "u1"}


class TensorFormatError(ValueError):
    pass


def header_bytes(shape) -> bytes:
    shape = tuple(int(d) for d in shape)
    if len(shape) > 255:
        raise TensorFormatError("rank exceeds 255")
    return MAGIC + struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def _payload_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return "u1"
    return "<f4"


def write_tensor(stream: BinaryIO, arr) -> None:
    arr = np.asarray(arr)
    stream.write(header_bytes(arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype=_payload_dtype(arr)).tobytes())


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def read_header(stream: BinaryIO) -> tuple[tuple[int, ...], int]:
    """Return (shape, header length in bytes)."""
    magic = stream.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    (rank,) = struct.unpack("<B", stream.read(1))
    dims = struct.unpack(f"<{rank}I", stream.read(4 * rank))
    return tuple(dims), 5 + 4 * rank


def _infer_dtype(shape, nbytes: int) -> str:
    count = int(np.prod(shape, dtype=np.int64))
    if nbytes == 4 * count:
        return "<f4"
    if nbytes == count:
        return "u1"
    raise TensorFormatError(f"payload of {nbytes} bytes does not fit shape {shape}")


def read_tensor(stream: BinaryIO) -> np.ndarray:
    """Read one tensor from an open stream positioned at a header.

    Streams holding several concatenated tensors (checkpoints) must be read
    with :func:`read_tensor_typed`, since the element type is inferred from
    the remaining length.
    """
    shape, _ = read_header(stream)
    payload = stream.read()
    dtype = _infer_dtype(shape, len(payload))
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def read_tensor_typed(stream: BinaryIO, dtype: str = "<f4") -> np.ndarray:
    shape, _ = read_header(stream)
    count = int(np.prod(shape, dtype=np.int64))
    width = np.dtype(dtype).itemsize
    payload = stream.read(count * width)
    if len(payload) != count * width:
        raise TensorFormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def load_tensor(path, mmap: bool = False) -> np.ndarray:
    """Load a TEN1 file; ``mmap=True`` returns a read-only memory map."""
    with open(path, "rb") as fh:
        shape, offset = read_header(fh)
    nbytes = os.path.getsize(path) - offset
    dtype = _infer_dtype(shape, nbytes)
    if mmap:
        return np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=shape)
    with open(path, "rb") as fh:
        return read_tensor(fh)


def open_tensor_for_write(path, shape, dtype) -> np.memmap:
    """Create a TEN1 file of the given shape and return a writable memory map
    over its payload, for datasets too large to hold in memory."""
    dtype = "u1" if np.dtype(dtype) in (np.dtype(np.uint8), np.dtype(np.bool_)) else "<f4"
    head = header_bytes(shape)
    count = int(np.prod(shape, dtype=np.int64))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.truncate(len(head) + count * np.dtype(dtype).itemsize)
    return np.memmap(path, dtype=dtype, mode="r+", offset=len(head), shape=tuple(shape))
