"""Grid dump files: magic ``CASPGRID``, u32 version, u32 rank, u32 extents, f32 LE payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CASPGRID"
VERSION = 1


def dumps(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise ValueError("not a grid dump (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"unsupported grid dump version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 16)
    off = 16 + 4 * rank
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 4 * n:
        raise ValueError("grid dump payload size does not match extents")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def save_grid(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load_grid(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
