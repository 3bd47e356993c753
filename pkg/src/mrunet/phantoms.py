"""Synthetic phantoms with mirrored, locally identical structures.

The default phantom is a soft-tissue trunk (elliptic cylinder along z) holding
two thin vertical bars in the upper half ("humeri") and two thicker bars in
the lower half ("femora"), mirrored about the mid-sagittal plane x = const.
A small patch inside the left bar looks exactly like one inside the right
bar; only a wider field of view that reaches the trunk wall tells them apart.

Axes: x left-right, y front-back, z top-bottom. Array index order is [x, y, z].
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import ClassMap, Volume, read_volume, write_volume


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Structure:
    """A labelled solid. Offsets are relative to the volume centre, in voxels.

    kind "bar": cylinder along z with radius ``radii[0]`` and half length ``radii[2]``.
    kind "ellipsoid": axis-aligned ellipsoid with semi-axes ``radii``.
    Mirrored structures produce ``<name>-left`` (negative x) and ``<name>-right``.
    """
    name: str
    kind: str
    offset: tuple[float, float, float]
    radii: tuple[float, float, float]
    mirrored: bool = True


DEFAULT_STRUCTURES = (
    Structure("humerus", "bar", (26.0, 0.0, -21.0), (3.0, 3.0, 17.0)),
    Structure("femur", "bar", (26.0, 0.0, 21.0), (5.0, 5.0, 17.0)),
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 96)
    structures: tuple[Structure, ...] = DEFAULT_STRUCTURES
    trunk_semi_axes: tuple[float, float] = (42.0, 26.0)  # x, y; spans all z
    background_mean: float = 0.0
    tissue_mean: float = 0.3
    foreground_mean: float = 1.0
    noise_fraction: float = 0.05  # sigma as a fraction of foreground-background contrast
    margin: int = 4
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def noise_sigma(self) -> float:
        return self.noise_fraction * abs(self.foreground_mean - self.background_mean)

    def class_names(self) -> list[str]:
        names = ["background"]
        for s in self.structures:
            names += [f"{s.name}-left", f"{s.name}-right"] if s.mirrored else [s.name]
        return names

    def class_map(self) -> ClassMap:
        return ClassMap(tuple(self.class_names()))

    def mirrored_pairs(self) -> list[tuple[int, int]]:
        pairs, c = [], 1
        for s in self.structures:
            if s.mirrored:
                pairs.append((c, c + 1))
                c += 2
            else:
                c += 1
        return pairs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "structures" in d:
            d["structures"] = tuple(
                Structure(s["name"], s["kind"], tuple(s["offset"]), tuple(s["radii"]), s.get("mirrored", True))
                for s in d["structures"]
            )
        for key in ("dims", "trunk_semi_axes", "spacing"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _instances(spec: PhantomSpec, shift: Sequence[float]):
    """(label, kind, centre, radii) for every structure instance."""
    mid = np.array([(n - 1) / 2.0 for n in spec.dims]) + np.asarray(shift, dtype=float)
    label = 1
    for s in spec.structures:
        ox, oy, oz = s.offset
        if s.mirrored:
            for sign in (-1.0, 1.0):
                yield label, s.kind, mid + np.array([sign * ox, oy, oz]), np.asarray(s.radii, dtype=float)
                label += 1
        else:
            yield label, s.kind, mid + np.array([ox, oy, oz]), np.asarray(s.radii, dtype=float)
            label += 1


def _check_fit(spec: PhantomSpec, shift) -> None:
    for label, kind, c, r in _instances(spec, shift):
        for axis in range(3):
            lo, hi = c[axis] - r[axis], c[axis] + r[axis]
            if lo < spec.margin or hi > spec.dims[axis] - 1 - spec.margin:
                raise PhantomError(
                    f"structure {spec.class_names()[label]} spans [{lo:.1f}, {hi:.1f}] on axis {axis}, "
                    f"outside the volume with margin {spec.margin}"
                )


def label_map(spec: PhantomSpec, shift=(0, 0, 0)) -> np.ndarray:
    _check_fit(spec, shift)
    x, y, z = np.meshgrid(*(np.arange(n, dtype=float) for n in spec.dims), indexing="ij")
    labels = np.zeros(spec.dims, dtype=np.uint16)
    for label, kind, c, r in _instances(spec, shift):
        if kind == "bar":
            mask = ((x - c[0]) ** 2 + (y - c[1]) ** 2 <= r[0] ** 2) & (np.abs(z - c[2]) <= r[2])
        elif kind == "ellipsoid":
            mask = ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0
        else:
            raise PhantomError(f"unknown structure kind {kind!r}")
        labels[mask] = label
    return labels


def trunk_mask(spec: PhantomSpec, shift=(0, 0, 0)) -> np.ndarray:
    mid = np.array([(n - 1) / 2.0 for n in spec.dims]) + np.asarray(shift, dtype=float)
    x, y = np.meshgrid(*(np.arange(n, dtype=float) for n in spec.dims[:2]), indexing="ij")
    ax, ay = spec.trunk_semi_axes
    m2 = ((x - mid[0]) / ax) ** 2 + ((y - mid[1]) / ay) ** 2 <= 1.0
    return np.broadcast_to(m2[:, :, None], spec.dims)


def generate(spec: PhantomSpec = PhantomSpec(), seed: int = 0, shift=(0, 0, 0), intensity_scale: float = 1.0):
    """Return ``(image, labels)`` volumes; deterministic in ``seed``."""
    labels = label_map(spec, shift)
    clean = np.where(trunk_mask(spec, shift), spec.tissue_mean, spec.background_mean)
    clean = np.where(labels > 0, spec.foreground_mean, clean) * intensity_scale
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(0.0, spec.noise_sigma * intensity_scale, size=spec.dims)
    image = Volume(noisy.astype(np.float32), spec.spacing)
    return image, Volume(labels, spec.spacing, classes=len(spec.class_names()))


@dataclass
class Scan:
    scan_id: int
    image: Volume
    labels: Volume
    shift: tuple[int, int, int]
    intensity_scale: float


def make_dataset(n_scans: int, spec: PhantomSpec = PhantomSpec(), seed: int = 0,
                 max_shift: int = 4, intensity_jitter: float = 0.05) -> list[Scan]:
    """``n_scans`` phantoms with a per-scan global shift and intensity scale."""
    # every structure must fit at the extreme shifts, so failure does not depend on the draw
    for corner in np.array(np.meshgrid(*([[-max_shift, max_shift]] * 3))).reshape(3, -1).T:
        _check_fit(spec, corner)
    children = np.random.SeedSequence(seed).spawn(n_scans)
    scans = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=3))
        scale = float(rng.uniform(1.0 - intensity_jitter, 1.0 + intensity_jitter))
        noise_seed = int(rng.integers(0, 2**31 - 1))
        image, labels = generate(spec, noise_seed, shift, scale)
        scans.append(Scan(i, image, labels, shift, scale))
    return scans


def write_dataset(scans: Sequence[Scan], spec: PhantomSpec, out_dir, folds=None, seed: int | None = None) -> Path:
    """Write every scan in volume format plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in scans:
        stem = f"scan{s.scan_id:03d}"
        write_volume(s.image, out / f"{stem}_image")
        write_volume(s.labels, out / f"{stem}_labels")
        entries.append({
            "id": s.scan_id,
            "image": f"{stem}_image",
            "labels": f"{stem}_labels",
            "shift": list(s.shift),
            "intensity_scale": s.intensity_scale,
        })
    spec.class_map().save(out / "classes.json")
    manifest = {
        "phantom_spec": spec.to_dict(),
        "seed": seed,
        "classes": spec.class_names(),
        "mirrored_pairs": spec.mirrored_pairs(),
        "scans": entries,
        "folds": [f.to_dict() for f in folds] if folds else [],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(data_dir) -> tuple[list[Scan], dict]:
    """Read a directory written by :func:`write_dataset`; returns ``(scans, manifest)``."""
    root = Path(data_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    scans = []
    for e in manifest["scans"]:
        scans.append(Scan(int(e["id"]), read_volume(root / e["image"]), read_volume(root / e["labels"]),
                          tuple(e.get("shift", (0, 0, 0))), float(e.get("intensity_scale", 1.0))))
    return scans, manifest
