"""Dense 3D volumes and their on-disk format.

A volume is stored as a pair of files sharing a stem:

``<name>.json``
    ``{"dims": [nx, ny, nz], "spacing": [sx, sy, sz], "dtype": "f32" | "u16",
    "order": "row-major-x-fastest"}`` plus ``"classes": C`` for label volumes.
``<name>.raw``
    ``nx*ny*nz`` little-endian values, x varying fastest, then y, then z.

In memory, ``Volume.data`` is indexed ``[x, y, z]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ORDER = "row-major-x-fastest"
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class VolumeError(ValueError):
    """Base class for volume format errors."""


class HeaderError(VolumeError):
    pass


class LengthMismatchError(VolumeError):
    pass


class UnknownDtypeError(VolumeError):
    pass


@dataclass(frozen=True)
class ClassMap:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names or self.names[0] != "background":
            raise ValueError("class 0 must be named 'background'")

    @property
    def count(self) -> int:
        return len(self.names)

    @classmethod
    def generic(cls, count: int) -> "ClassMap":
        return cls(("background",) + tuple(f"class{i}" for i in range(1, count)))

    @classmethod
    def load(cls, path) -> "ClassMap":
        obj = json.loads(Path(path).read_text())
        names = obj["names"] if isinstance(obj, dict) else obj
        return cls(tuple(names))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"count": self.count, "names": list(self.names)}, indent=2))


class Volume:
    """Immutable dense grid with voxel spacing in millimetres."""

    __slots__ = ("data", "spacing", "classes")

    def __init__(self, data: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0), classes: int | None = None):
        data = np.asarray(data)
        if data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise VolumeError(f"all dims must be >= 1, got {data.shape}")
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive numbers, got {spacing}")
        if classes is not None:
            if data.dtype.kind not in "ui":
                raise VolumeError("label volumes need an integer dtype")
            if data.size and (data.min() < 0 or data.max() >= classes):
                raise VolumeError(f"label values must lie in [0, {classes})")
            data = data.astype(np.uint16, copy=False)
        elif data.dtype != np.float32:
            data = data.astype(np.float32)
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "classes", classes)

    def __setattr__(self, name, value):
        raise AttributeError("Volume is immutable")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def is_label(self) -> bool:
        return self.classes is not None

    @property
    def dtype_tag(self) -> str:
        return "u16" if self.is_label else "f32"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.classes == other.classes
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self) -> str:
        kind = f"labels, {self.classes} classes" if self.is_label else "float32"
        return f"Volume(dims={self.dims}, spacing={self.spacing}, {kind})"


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def write_volume(v: Volume, path) -> None:
    """Write ``<path>.json`` and ``<path>.raw``. ``path`` may carry either suffix or none."""
    hdr_path, raw_path = _paths(path)
    header = {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": v.dtype_tag, "order": ORDER}
    if v.is_label:
        header["classes"] = v.classes
    raw = np.asarray(v.data, dtype=_DTYPES[v.dtype_tag]).ravel(order="F").tobytes()
    raw_path.write_bytes(raw)
    hdr_path.write_text(json.dumps(header))


def read_volume(path) -> Volume:
    hdr_path, raw_path = _paths(path)
    try:
        header = json.loads(hdr_path.read_text())
    except json.JSONDecodeError as exc:
        raise HeaderError(f"{hdr_path}: invalid JSON header ({exc})") from None
    if not isinstance(header, dict):
        raise HeaderError(f"{hdr_path}: header must be a JSON object")
    for key in ("dims", "spacing", "dtype"):
        if key not in header:
            raise HeaderError(f"{hdr_path}: missing header field {key!r}")
    if header.get("order", ORDER) != ORDER:
        raise HeaderError(f"{hdr_path}: unsupported order {header['order']!r}")
    dims, spacing = header["dims"], header["spacing"]
    if (
        not isinstance(dims, list) or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in dims)
    ):
        raise HeaderError(f"{hdr_path}: dims must be three integers >= 1, got {dims!r}")
    if not isinstance(spacing, list) or len(spacing) != 3 or not all(
        isinstance(s, (int, float)) and s > 0 for s in spacing
    ):
        raise HeaderError(f"{hdr_path}: spacing must be three positive numbers, got {spacing!r}")
    tag = header["dtype"]
    if tag not in _DTYPES:
        raise UnknownDtypeError(f"{hdr_path}: unknown dtype {tag!r} (expected 'f32' or 'u16')")
    classes = header.get("classes")
    if tag == "u16" and not (isinstance(classes, int) and classes >= 1):
        raise HeaderError(f"{hdr_path}: label volumes need an integer 'classes' field")
    dt = _DTYPES[tag]
    raw = raw_path.read_bytes()
    expected = int(np.prod(dims))
    if len(raw) != expected * dt.itemsize:
        raise LengthMismatchError(
            f"{raw_path}: expected {expected} values ({expected * dt.itemsize} bytes), found {len(raw)} bytes"
        )
    flat = np.frombuffer(raw, dtype=dt)
    data = flat.reshape(dims, order="F")
    if tag == "u16":
        return Volume(data.astype(np.uint16), spacing, classes=classes)
    return Volume(data.astype(np.float32), spacing)


def pad_edge(v: Volume, pad) -> Volume:
    """Grow every axis by ``2 * pad`` voxels, replicating the nearest edge voxel."""
    if isinstance(pad, (int, np.integer)):
        pad = (int(pad),) * 3
    pad = tuple(int(p) for p in pad)
    if any(p < 0 for p in pad):
        raise ValueError(f"padding must be >= 0, got {pad}")
    if not any(pad):
        return v
    data = np.pad(v.data, [(p, p) for p in pad], mode="edge")
    return Volume(data, v.spacing, classes=v.classes)


def context_padding(target_size: Sequence[int], kappas: Sequence[int]) -> tuple[int, int, int]:
    """Per-side padding ``(S_max - S_target) / 2`` where ``S_max`` is the largest context window.

    With this padding every voxel of the original image can be a patch centre.
    """
    kmax = max(kappas) if kappas else 0
    return tuple((s * 2**kmax - s) // 2 for s in target_size)
