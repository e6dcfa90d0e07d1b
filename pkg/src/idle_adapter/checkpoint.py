"""Named-tensor binary checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    b"IDLEKPT1"
    count
    count x { name_len, name (UTF-8), rank, dims[rank], payload (float64 LE, row-major) }
    meta_len, metadata (UTF-8 JSON, sorted keys)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"IDLEKPT1"
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    parts = [MAGIC, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(int(s)) for s in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = json.dumps(dict(metadata or {}), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [_U32.pack(len(meta)), meta]
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, "
                                  f"file has {len(view)}")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32(what: str) -> int:
        return _U32.unpack(take(4, what))[0]

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise CheckpointError("bad magic at offset 0: not an IDLEKPT1 checkpoint")
    count = u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        name = bytes(take(u32("name length"), "name")).decode("utf-8")
        rank = u32(f"rank of {name}")
        dims = tuple(u32(f"dims of {name}") for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        payload = take(8 * n, f"payload of {name}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r} at offset {start}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    meta_len = u32("metadata length")
    meta_raw = bytes(take(meta_len, "metadata"))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after metadata at offset {pos}")
    try:
        metadata = json.loads(meta_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"metadata at offset {pos - meta_len} is not valid JSON ({exc})") from None
    return tensors, metadata


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load_checkpoint(path, expected_shapes: Mapping[str, tuple] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; ``expected_shapes`` (if given) must match exactly."""
    tensors, metadata = loads(Path(path).read_bytes())
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(tensors)
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, shape in expected_shapes.items():
            if tuple(tensors[name].shape) != tuple(shape):
                raise CheckpointError(f"tensor {name!r} has shape {tensors[name].shape}, expected {tuple(shape)}")
    return tensors, metadata


def digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 of the serialized tensors (no metadata)."""
    return hashlib.sha256(dumps(tensors)).hexdigest()
