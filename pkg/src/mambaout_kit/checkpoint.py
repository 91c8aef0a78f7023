"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MOKT"  u32 version  u32 entry_count
    per entry:
        u32 name_len, name (UTF-8)
        u8 dtype tag (0 = float32, 1 = float64)
        u32 rank, u64 extent * rank
        raw row-major data
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

MAGIC = b"MOKT"
VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def _state(obj) -> dict[str, np.ndarray]:
    if hasattr(obj, "named_parameters"):
        return {name: t.data for name, t in obj.named_parameters()}
    return {name: getattr(v, "data", v) for name, v in obj.items()}


def save_checkpoint(path, obj) -> Path:
    """Write a model's parameters (or a name -> array mapping) to ``path``."""
    state = _state(obj)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(state)))
        for name, arr in state.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAGS:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return path


def _read(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def iter_entries(path, load_data: bool = True) -> Iterator[tuple[str, np.dtype, tuple[int, ...], np.ndarray | None]]:
    """Yield ``(name, dtype, shape, data)``; ``data`` is None when not loading."""
    with open(path, "rb") as f:
        if _read(f, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a MOKT checkpoint")
        version, count = struct.unpack("<II", _read(f, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read(f, 4))
            name = _read(f, name_len).decode("utf-8")
            tag, rank = struct.unpack("<BI", _read(f, 5))
            if tag not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            dtype = _DTYPES[tag]
            shape = struct.unpack(f"<{rank}Q", _read(f, 8 * rank))
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if load_data:
                data = np.frombuffer(_read(f, nbytes), dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
            else:
                f.seek(nbytes, 1)
                data = None
            yield name, dtype, tuple(shape), data


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return {name: data for name, _, _, data in iter_entries(path)}


def load_into(model, path) -> None:
    model.load_state(load_checkpoint(path))
