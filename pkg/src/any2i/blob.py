"""Tensor blob files: magic "OGT1", u32 rank, u32 extents, float32 payload.

All integers and floats are little-endian; payload is row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"OGT1"


def write_blob(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f4", copy=False).tobytes())


def read_blob(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor blob magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated tensor blob payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_blob(f, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing tensor blob: {path}")
    with open(path, "rb") as f:
        return read_blob(f)
