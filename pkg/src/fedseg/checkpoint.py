"""Binary weight checkpoints (FPWT format).

Little-endian layout: magic "FPWT", version u32, tensor count u32, then per
tensor a u16 name length, the UTF-8 name, a u8 rank, u32 extents, and the
raw float64 values. Save/load round-trips are bit-exact and preserve order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"FPWT"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps rank-0 rank 0
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {arr.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    offset = 0
    magic, version, count = struct.unpack("<4sII", take(12, "header"))
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * n_values, f"values of {name}"), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(np.float64)
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after last tensor")
    return tensors
