"""Attenuation volumes, label maps and fiducials."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

DEFAULT_MU_WATER = 0.02  # mm^-1


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """A scalar grid with a diagonal voxel-to-world affine.

    ``data`` is indexed ``[i, j, k]`` along world x, y, z. Voxel ``(i, j, k)``
    spans ``origin + [index, index + 1) * spacing``; its value is located at
    the voxel centre. Negative spacings flip an axis.

    ``units`` is ``"attenuation"`` (linear attenuation in mm^-1, must be
    non-negative) or ``"hu"`` (Hounsfield units, see
    :func:`hu_to_attenuation`).
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    units: str = "attenuation"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if data.dtype.kind not in "iuf":
            raise ValueError(f"unsupported voxel dtype {data.dtype}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin need three components")
        if any(s == 0 or not np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be finite and non-zero, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError("origin must be finite")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        if self.units not in ("attenuation", "hu"):
            raise ValueError(f"unknown units {self.units!r}")
        if self.units == "attenuation" and data.size and data.min() < 0:
            raise ValueError("linear attenuation coefficients must be non-negative")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @cached_property
    def values(self) -> np.ndarray:
        """Voxel values as a C-contiguous float64 array (shared, read-only)."""
        return _readonly(np.ascontiguousarray(self.data, dtype=np.float64))

    def affine(self) -> np.ndarray:
        A = np.diag([*self.spacing, 1.0])
        A[:3, 3] = self.origin
        return A

    def isocenter(self) -> np.ndarray:
        return np.asarray(self.shape) * np.asarray(self.spacing) / 2.0 + np.asarray(self.origin)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned world bounding box ``(lo, hi)`` of the voxel grid."""
        o = np.asarray(self.origin)
        far = o + np.asarray(self.shape) * np.asarray(self.spacing)
        return np.minimum(o, far), np.maximum(o, far)

    def voxel_centers(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * np.asarray(self.spacing)

    def with_data(self, data, units: str | None = None) -> "Volume":
        return Volume(data, self.spacing, self.origin, units or self.units)

    def translated(self, offset) -> "Volume":
        return Volume(self.data, self.spacing, tuple(np.asarray(self.origin) + offset), self.units)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer structure labels on the same grid as a :class:`Volume`.

    Label 0 is background.
    """

    labels: np.ndarray
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3 or lab.dtype.kind not in "iu":
            raise ValueError("label map must be a 3D integer array")
        if lab.size and lab.min() < 0:
            raise ValueError("labels must be non-negative")
        if 0 in self.names and self.names[0] not in ("", "background"):
            raise ValueError("label 0 is reserved for background")
        object.__setattr__(self, "labels", _readonly(lab))
        object.__setattr__(self, "names", {int(k): str(v) for k, v in self.names.items()})

    @property
    def shape(self):
        return self.labels.shape

    def ids(self) -> set[int]:
        return {int(v) for v in np.unique(self.labels)} - {0}


@dataclass(frozen=True)
class FiducialSet:
    """Named 3D world points (mm) used only to score registrations."""

    points: tuple[tuple[str, tuple[float, float, float]], ...]

    def __post_init__(self):
        pts = tuple((str(n), tuple(float(c) for c in xyz)) for n, xyz in self.points)
        names = [n for n, _ in pts]
        if len(set(names)) != len(names):
            raise ValueError("fiducial names must be unique")
        for n, xyz in pts:
            if len(xyz) != 3 or not all(np.isfinite(xyz)):
                raise ValueError(f"fiducial {n!r} must have three finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.points]

    @property
    def xyz(self) -> np.ndarray:
        return np.array([p for _, p in self.points], dtype=np.float64).reshape(-1, 3)

    def to_json(self) -> dict:
        return {"fiducials": [{"name": n, "xyz_mm": list(p)} for n, p in self.points]}

    @classmethod
    def from_json(cls, d: dict) -> "FiducialSet":
        return cls(tuple((f["name"], tuple(f["xyz_mm"])) for f in d["fiducials"]))


def hu_to_attenuation(v: Volume, mu_water_per_mm: float = DEFAULT_MU_WATER) -> Volume:
    """Map Hounsfield units to linear attenuation, ``mu_w (1 + HU / 1000)``.

    Values below air are clamped to 0.
    """
    if not mu_water_per_mm > 0:
        raise ValueError("mu_water_per_mm must be positive")
    mu = mu_water_per_mm * (1.0 + np.asarray(v.data, dtype=np.float64) / 1000.0)
    return v.with_data(np.maximum(mu, 0.0), units="attenuation")


def mask_structures(v: Volume, labels: LabelMap, keep) -> Volume:
    """Zero every voxel whose label is not in ``keep``."""
    if labels.shape != v.shape:
        raise ValueError(f"label map shape {labels.shape} does not match volume {v.shape}")
    keep_ids = np.array(sorted({int(k) for k in keep}), dtype=np.int64)
    mask = np.isin(labels.labels, keep_ids)
    return v.with_data(np.where(mask, v.data, np.zeros((), dtype=v.data.dtype)))
