"""Versioned binary checkpoints.

Layout: ``"LGCK"``, u32 version, u64 header length, a UTF-8 JSON header
(sorted keys), then every tensor as little-endian float64 in header order.
The header lists each tensor's name, shape and element offset and carries
arbitrary JSON metadata.  No timestamps are stored, so identical state
gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LGCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(meta: dict, tensors: dict) -> bytes:
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta, "tensors": manifest}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(path, meta: dict, tensors: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(meta, tensors))
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(meta, {name: float64 array})``."""
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"{path}: too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hlen
    header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    data = np.frombuffer(buf, dtype="<f8", offset=start)
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo + size > data.size:
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the end of the file")
        tensors[entry["name"]] = data[lo:lo + size].reshape(entry["shape"]).astype(np.float64)
    return header["meta"], tensors
