"""Binary tensor files.

Layout (all little-endian)::

    b"WZT1" | u8 ndim | ndim x u32 dims | row-major float32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"WZT1"
_DTYPE = np.dtype("<f4")


def encode_tensor(arr) -> bytes:
    a = np.ascontiguousarray(arr, dtype=_DTYPE)
    if a.ndim > 255:
        raise ValueError("too many dimensions for WZT1")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes(order="C")


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 5:
        raise FormatError(f"{source}: truncated header")
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    ndim = buf[4]
    end = 5 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"{source}: truncated shape header")
    shape = struct.unpack(f"<{ndim}I", buf[5:end])
    n = int(np.prod(shape, dtype=np.int64))
    expected = end + n * _DTYPE.itemsize
    if len(buf) != expected:
        raise FormatError(
            f"{source}: payload is {len(buf) - end} bytes, header shape {tuple(shape)} needs {n * _DTYPE.itemsize}"
        )
    return np.frombuffer(buf, dtype=_DTYPE, count=n, offset=end).reshape(shape).astype(np.float64)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path, expected_shape=None) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: missing tensor file") from exc
    arr = decode_tensor(buf, str(path))
    if expected_shape is not None and tuple(arr.shape) != tuple(expected_shape):
        raise FormatError(
            f"{path}: manifest shape {tuple(expected_shape)} disagrees with tensor header {tuple(arr.shape)}"
        )
    return arr


def to_f32(arr) -> np.ndarray:
    """Round through single precision, matching what a save/load cycle yields."""
    return np.asarray(arr, dtype=_DTYPE).astype(np.float64)
