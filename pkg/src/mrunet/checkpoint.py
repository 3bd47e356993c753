"""Parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"MRUNETCK"
    version    uint32    1
    manifest   uint32 length, then UTF-8 JSON (sorted keys, no whitespace)
    blobs      float32 LE, one per manifest ``params`` entry, in listed order

The manifest holds ``{"params": [{"name", "shape", "offset", "count"}], "meta": {...}}``.
Offsets count float32 elements from the start of the blob section. Identical
parameters and metadata always serialize to identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MRUNETCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(params: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    offset = 0
    blobs = []
    for name, arr in params.items():
        a = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        offset += a.size
        blobs.append(np.ascontiguousarray(a).tobytes())
    manifest = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")).encode()
    head = MAGIC + struct.pack("<II", VERSION, len(manifest))
    return head + manifest + b"".join(blobs)


def from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, mlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(buf[16 : 16 + mlen].decode())
    blob = np.frombuffer(buf, dtype="<f4", offset=16 + mlen)
    params = {}
    for e in manifest["params"]:
        lo, n = e["offset"], e["count"]
        if lo + n > blob.size:
            raise CheckpointError(f"truncated blob for parameter {e['name']}")
        params[e["name"]] = blob[lo : lo + n].astype(np.float32).reshape(e["shape"])
    return params, manifest.get("meta", {})


def save(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    data = to_bytes(params, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())


def checksum(params: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    return hashlib.sha256(to_bytes(params, meta)).hexdigest()
