"""Center-aligned multi-resolution patch sets.

Coordinates are voxel indices into the *padded* volume. A patch of even edge
length ``s`` centred at ``c`` spans ``[c - s/2, c + s/2)``. Context ``k``
spans ``2**kappa_k`` times the target extent around the same centre and is
average-pooled back to the target size.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .volume import Volume


@dataclass(frozen=True)
class PatchSpec:
    target_size: tuple[int, int, int]
    kappas: tuple[int, ...] = ()
    levels: int = 5

    def __post_init__(self):
        ts = self.target_size
        if isinstance(ts, (int, np.integer)):
            ts = (int(ts),) * 3
        object.__setattr__(self, "target_size", tuple(int(s) for s in ts))
        object.__setattr__(self, "kappas", tuple(int(k) for k in self.kappas))
        mult = 2 ** (self.levels - 1)
        if len(self.target_size) != 3 or any(s <= 0 or s % mult for s in self.target_size):
            raise ValueError(f"target_size {self.target_size} must be positive multiples of {mult}")
        if any(k < 1 for k in self.kappas) or any(a >= b for a, b in zip(self.kappas, self.kappas[1:])):
            raise ValueError(f"kappas must be strictly increasing and >= 1, got {self.kappas}")

    @classmethod
    def from_config(cls, config) -> "PatchSpec":
        return cls(tuple(config.target_size), tuple(config.kappas), config.levels)

    def window(self, k: int | None = None) -> tuple[int, int, int]:
        """Edge lengths of the target window (k=None) or of context k's window."""
        f = 1 if k is None else 2 ** self.kappas[k]
        return tuple(s * f for s in self.target_size)

    @property
    def max_window(self) -> tuple[int, int, int]:
        return self.window(len(self.kappas) - 1) if self.kappas else self.target_size

    @property
    def padding(self) -> tuple[int, int, int]:
        return tuple((w - s) // 2 for w, s in zip(self.max_window, self.target_size))

    @property
    def input_voxels(self) -> int:
        return (1 + len(self.kappas)) * int(np.prod(self.target_size))


@dataclass
class PatchSet:
    target: np.ndarray
    contexts: list[np.ndarray] = field(default_factory=list)
    center: tuple[int, int, int] = (0, 0, 0)

    @property
    def arrays(self) -> list[np.ndarray]:
        return [self.target] + list(self.contexts)


def downsample_avg(v: np.ndarray, kappa: int) -> np.ndarray:
    """Mean over non-overlapping ``2**kappa`` cubes."""
    f = 2**kappa
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    if any(s % f for s in v.shape):
        raise ValueError(f"dims {v.shape} not divisible by 2^kappa = {f}")
    nx, ny, nz = (s // f for s in v.shape)
    out = np.asarray(v, dtype=np.float64).reshape(nx, f, ny, f, nz, f).mean(axis=(1, 3, 5))
    return out.astype(v.dtype if v.dtype.kind == "f" else np.float32)


def downsample_nearest(v: np.ndarray, kappa: int) -> np.ndarray:
    """Pick one representative voxel per ``2**kappa`` cube.

    The representative is the voxel at offset ``2**kappa // 2`` inside the
    block, i.e. the block's centre rounded up.
    """
    f = 2**kappa
    if any(s % f for s in v.shape):
        raise ValueError(f"dims {v.shape} not divisible by 2^kappa = {f}")
    o = f // 2
    return np.ascontiguousarray(v[o::f, o::f, o::f])


def _crop(data: np.ndarray, center: Sequence[int], size: Sequence[int]) -> np.ndarray:
    lo = [c - s // 2 for c, s in zip(center, size)]
    hi = [l + s for l, s in zip(lo, size)]
    if any(l < 0 for l in lo) or any(h > n for h, n in zip(hi, data.shape)):
        raise IndexError(
            f"window of size {tuple(size)} at centre {tuple(center)} exceeds volume dims {data.shape}; "
            "pad the volume by the largest context margin first"
        )
    return data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]


def _raw(image) -> np.ndarray:
    return image.data if isinstance(image, Volume) else np.asarray(image)


def sample_patchset(image, center: Sequence[int], spec: PatchSpec) -> PatchSet:
    data = _raw(image)
    center = tuple(int(c) for c in center)
    target = np.array(_crop(data, center, spec.target_size), dtype=np.float32)
    contexts = [
        downsample_avg(np.asarray(_crop(data, center, spec.window(k)), dtype=np.float32), kappa)
        for k, kappa in enumerate(spec.kappas)
    ]
    return PatchSet(target, contexts, center)


def sample_label_patchset(labels, center: Sequence[int], spec: PatchSpec, context_label_mode: str = "nearest") -> PatchSet:
    if context_label_mode != "nearest":
        raise ValueError(f"unsupported context label mode {context_label_mode!r}")
    data = _raw(labels)
    center = tuple(int(c) for c in center)
    target = np.array(_crop(data, center, spec.target_size))
    contexts = [downsample_nearest(_crop(data, center, spec.window(k)), kappa) for k, kappa in enumerate(spec.kappas)]
    return PatchSet(target, contexts, center)


def _axis_starts(n: int, s: int) -> list[int]:
    if n <= s:
        return [0]
    starts = list(range(0, n - s + 1, s))
    if starts[-1] + s < n:
        starts.append(n - s)
    return starts


def tile_centers(image_dims: Sequence[int], spec: PatchSpec) -> list[tuple[int, int, int]]:
    """Centres (in original, unpadded coordinates) of target patches that cover the image.

    Patches step by the target size; the last patch per axis is moved flush
    with the border, overlapping its neighbour when the size does not divide.
    """
    if any(n < s for n, s in zip(image_dims, spec.target_size)):
        raise ValueError(f"image dims {tuple(image_dims)} smaller than target patch {spec.target_size}")
    per_axis = [[st + s // 2 for st in _axis_starts(n, s)] for n, s in zip(image_dims, spec.target_size)]
    return [(x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]]


def valid_center_range(image_dims: Sequence[int], spec: PatchSpec) -> list[tuple[int, int]]:
    """Inclusive (lo, hi) per axis, original coordinates, for which the target patch stays inside the image."""
    return [(s // 2, n - s // 2) for n, s in zip(image_dims, spec.target_size)]
