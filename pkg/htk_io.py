"""HTK1 tensor container: magic, dtype code, rank, u32 LE extents, raw LE values."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from config import CONTAINER_MAGIC

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PathLike = Union[str, Path]


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"Container holds float32/float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError(f"Rank {array.ndim} does not fit the container header")
    header = CONTAINER_MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    body = np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes(order="C")
    return header + body


def decode(payload: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if payload[:4] != CONTAINER_MAGIC:
        raise ValueError(f"{source}: not an HTK1 container (magic {payload[:4]!r})")
    if len(payload) < 6:
        raise ValueError(f"{source}: truncated header")
    code, rank = struct.unpack_from("<BB", payload, 4)
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise ValueError(f"{source}: unknown dtype code {code}")
    offset = 6 + 4 * rank
    if len(payload) < offset:
        raise ValueError(f"{source}: truncated extents")
    shape = struct.unpack_from(f"<{rank}I", payload, 6)
    count = int(np.prod(shape)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(f"{source}: expected {expected} bytes for shape {shape}, found {len(payload)}")
    values = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    return values.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path: PathLike, array: np.ndarray) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(array))
    except OSError as exc:
        raise OSError(f"Could not write {path}: {exc}") from exc


def load_tensor(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Tensor container not found: {path}")
    return decode(path.read_bytes(), source=str(path))

