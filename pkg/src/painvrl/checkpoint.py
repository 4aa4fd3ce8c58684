"""Versioned binary checkpoints.

Layout: 8-byte magic, uint16 version, uint32 header length, a UTF-8 JSON header
(segment names and shapes plus free-form metadata), then each segment as raw
little-endian float64 in header order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PAINVRL\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` (in insertion order) and JSON-serialisable ``meta`` atomically."""
    segments = []
    blobs = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        segments.append({"name": name, "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a).tobytes())
    header = json.dumps({"segments": segments, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt layout descriptor") from exc
    offset = start + hlen
    arrays = {}
    for seg in header["segments"]:
        shape = tuple(seg["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: segment {seg['name']!r} runs past end of file")
        arrays[seg["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header["meta"]
