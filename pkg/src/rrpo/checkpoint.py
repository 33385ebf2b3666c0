"""Binary checkpoint container shared by reward models and policies.

Layout (all little-endian)::

    b"RRPO-CKPT\\0"  version:u16  dims:u32*3
    repeated until EOF:  rank:u32  shape:u32*rank  data:f64*prod(shape)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RRPO-CKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, dims, arrays, meta=None) -> None:
    path = Path(path)
    if len(dims) != 3:
        raise CheckpointError(f"dims must be a triple, got {dims!r}")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<3I", *(int(d) for d in dims))]
    for arr in arrays:
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(parts))
    if meta is not None:
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path) -> tuple[tuple[int, int, int], list[np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from("<3I", buf, pos)
    pos += 12
    arrays = []
    while pos < len(buf):
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        end = pos + 8 * count
        if end > len(buf):
            raise CheckpointError(f"{path}: truncated array data")
        arrays.append(np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64))
        pos = end
    return tuple(dims), arrays


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
