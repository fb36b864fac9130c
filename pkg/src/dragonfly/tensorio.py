"""Portable ``DFT1`` tensor files.

Layout: magic ``b"DFT1"``, one byte dtype code, one byte rank, ``rank``
little-endian uint32 extents, then the raw little-endian values in row-major
order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DFT1"

DTYPE_CODES = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


class TensorFileError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise TensorFileError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFileError(f"{source}: bad magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPE_CODES:
        raise TensorFileError(f"{source}: unknown dtype code {code}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise TensorFileError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    dt = DTYPE_CODES[code]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + n * dt.itemsize:
        raise TensorFileError(f"{source}: payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(arr))
    return path


def load(path) -> np.ndarray:
    path = Path(path)
    return decode(path.read_bytes(), str(path))
