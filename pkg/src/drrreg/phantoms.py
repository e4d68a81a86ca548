"""Analytic test phantoms with known line integrals.

Every phantom is centred on the world origin, so its isocenter is (0, 0, 0).
Voxels are rasterized by testing the voxel centre.
"""

from __future__ import annotations

import math

import numpy as np

from .volume import FiducialSet, LabelMap, Volume

PHANTOM_KINDS = ("uniform_cube", "sphere", "nested_spheres", "two_boxes", "sphere_in_box", "smooth")


def _grid(extent_mm, voxel_mm):
    """Centred grid covering ``extent_mm`` (3,) at ``voxel_mm``."""
    n = [max(1, int(math.ceil(e / voxel_mm - 1e-9))) for e in extent_mm]
    origin = [-ni * voxel_mm / 2.0 for ni in n]
    axes = [origin[a] + (np.arange(n[a]) + 0.5) * voxel_mm for a in range(3)]
    return n, origin, axes


def _positive(**kw):
    for name, value in kw.items():
        if not (np.all(np.asarray(value) > 0) and np.all(np.isfinite(value))):
            raise ValueError(f"{name} must be positive, got {value}")


def _box_corners(prefix, center, size):
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(size, dtype=np.float64) / 2.0
    out = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                tag = "".join("+" if s > 0 else "-" for s in (sx, sy, sz))
                out.append((f"{prefix}{tag}", tuple(c + h * (sx, sy, sz))))
    return out


def _sphere_points(prefix, center, radius):
    c = np.asarray(center, dtype=np.float64)
    pts = [(f"{prefix}center", tuple(c))]
    for axis, name in enumerate("xyz"):
        for sign in (-1, 1):
            p = c.copy()
            p[axis] += sign * radius
            pts.append((f"{prefix}{'+' if sign > 0 else '-'}{name}", tuple(p)))
    return pts


def uniform_cube(edge_mm=10.0, mu=0.02, voxel_mm=1.0):
    """The whole grid is one cube of constant attenuation."""
    _positive(edge_mm=edge_mm, mu=mu, voxel_mm=voxel_mm)
    n = int(round(edge_mm / voxel_mm))
    if abs(n * voxel_mm - edge_mm) > 1e-9 * edge_mm:
        raise ValueError("edge_mm must be a whole number of voxels")
    vol = Volume(np.full((n, n, n), mu), (voxel_mm,) * 3, (-edge_mm / 2.0,) * 3)
    fid = FiducialSet(tuple(_box_corners("corner", (0, 0, 0), (edge_mm,) * 3)))
    return vol, fid, None


def sphere(radius_mm=20.0, mu=0.01, voxel_mm=0.25, margin_mm=2.0):
    _positive(radius_mm=radius_mm, mu=mu, voxel_mm=voxel_mm)
    n, origin, (x, y, z) = _grid([2 * (radius_mm + margin_mm)] * 3, voxel_mm)
    r2 = x[:, None, None] ** 2 + y[None, :, None] ** 2 + z[None, None, :] ** 2
    data = np.where(r2 <= radius_mm**2, mu, 0.0)
    fid = FiducialSet(tuple(_sphere_points("", (0, 0, 0), radius_mm)))
    return Volume(data, (voxel_mm,) * 3, origin), fid, None


def nested_spheres(
    outer_radius_mm=20.0, inner_radius_mm=8.0, mu_outer=0.01, mu_inner=0.03, voxel_mm=0.25, margin_mm=2.0
):
    """Concentric spheres; labels 1 = outer shell, 2 = inner sphere."""
    _positive(
        outer_radius_mm=outer_radius_mm, inner_radius_mm=inner_radius_mm,
        mu_outer=mu_outer, mu_inner=mu_inner, voxel_mm=voxel_mm,
    )
    if inner_radius_mm >= outer_radius_mm:
        raise ValueError("inner radius must be smaller than outer radius")
    n, origin, (x, y, z) = _grid([2 * (outer_radius_mm + margin_mm)] * 3, voxel_mm)
    r2 = x[:, None, None] ** 2 + y[None, :, None] ** 2 + z[None, None, :] ** 2
    labels = np.zeros(r2.shape, dtype=np.int16)
    labels[r2 <= outer_radius_mm**2] = 1
    labels[r2 <= inner_radius_mm**2] = 2
    data = np.choose(labels, [0.0, mu_outer, mu_inner])
    fid = FiducialSet(tuple(_sphere_points("", (0, 0, 0), outer_radius_mm)))
    lm = LabelMap(labels, {1: "outer", 2: "inner"})
    return Volume(data, (voxel_mm,) * 3, origin), fid, lm


def two_boxes(box_mm=20.0, gap_mm=10.0, mu=0.02, voxel_mm=1.0):
    """Two equal cubes separated by an air gap along x."""
    _positive(box_mm=box_mm, gap_mm=gap_mm, mu=mu, voxel_mm=voxel_mm)
    extent = [2 * box_mm + gap_mm, box_mm, box_mm]
    n, origin, (x, y, z) = _grid(extent, voxel_mm)
    half = gap_mm / 2.0
    inx = (np.abs(x) >= half) & (np.abs(x) <= half + box_mm)
    iny = np.abs(y) <= box_mm / 2.0
    inz = np.abs(z) <= box_mm / 2.0
    data = np.where(inx[:, None, None] & iny[None, :, None] & inz[None, None, :], mu, 0.0)
    cx = half + box_mm / 2.0
    fid = _box_corners("left", (-cx, 0, 0), (box_mm,) * 3) + _box_corners("right", (cx, 0, 0), (box_mm,) * 3)
    return Volume(data, (voxel_mm,) * 3, origin), FiducialSet(tuple(fid)), None


def sphere_in_box(
    box_mm=(120.0, 90.0, 100.0),
    sphere_radius_mm=22.0,
    sphere_center_mm=(18.0, -12.0, 14.0),
    mu_box=0.004,
    mu_sphere=0.02,
    voxel_mm=2.0,
    margin_mm=4.0,
):
    """A low-attenuation box holding an off-centre dense sphere.

    The offset breaks every mirror symmetry of the box, so all six pose
    parameters are observable. Labels: 1 = box, 2 = sphere.
    """
    _positive(box_mm=box_mm, sphere_radius_mm=sphere_radius_mm, mu_box=mu_box, mu_sphere=mu_sphere, voxel_mm=voxel_mm)
    box = np.asarray(box_mm, dtype=np.float64)
    c = np.asarray(sphere_center_mm, dtype=np.float64)
    n, origin, (x, y, z) = _grid(box + 2 * margin_mm, voxel_mm)
    inbox = (
        (np.abs(x)[:, None, None] <= box[0] / 2)
        & (np.abs(y)[None, :, None] <= box[1] / 2)
        & (np.abs(z)[None, None, :] <= box[2] / 2)
    )
    r2 = (x[:, None, None] - c[0]) ** 2 + (y[None, :, None] - c[1]) ** 2 + (z[None, None, :] - c[2]) ** 2
    labels = np.zeros(inbox.shape, dtype=np.int16)
    labels[inbox] = 1
    labels[r2 <= sphere_radius_mm**2] = 2
    data = np.choose(labels, [0.0, mu_box, mu_sphere])
    fid = [("sphere_center", tuple(c))] + _box_corners("box", (0, 0, 0), box)
    lm = LabelMap(labels, {1: "box", 2: "sphere"})
    return Volume(data, (voxel_mm,) * 3, origin), FiducialSet(tuple(fid)), lm


SMOOTH_BLOBS = (
    # center (mm), sigma (mm), peak mu
    ((0.0, 0.0, 0.0), (120.0, 96.0, 108.0), 0.002),
    ((120.0, -60.0, 75.0), (90.0, 102.0, 84.0), 0.002),
    ((-105.0, 75.0, -90.0), (84.0, 90.0, 96.0), 0.0017),
)


def smooth(extent_mm=720.0, voxel_mm=6.0, blobs=SMOOTH_BLOBS):
    """Sum of broad anisotropic Gaussian blobs.

    Each blob spans 14 or more voxels per standard deviation, so the
    trilinear interpolant bends little from one voxel to the next and
    finite differences of a render stay close to its exact derivative.
    """
    _positive(extent_mm=extent_mm, voxel_mm=voxel_mm)
    n, origin, (x, y, z) = _grid([extent_mm] * 3, voxel_mm)
    data = np.zeros(n)
    for center, sigma, peak in blobs:
        gx = np.exp(-0.5 * ((x - center[0]) / sigma[0]) ** 2)
        gy = np.exp(-0.5 * ((y - center[1]) / sigma[1]) ** 2)
        gz = np.exp(-0.5 * ((z - center[2]) / sigma[2]) ** 2)
        data += peak * gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    fid = FiducialSet(tuple((f"blob{i}", tuple(b[0])) for i, b in enumerate(blobs)))
    return Volume(data, (voxel_mm,) * 3, origin), fid, None


_BUILDERS = {
    "uniform_cube": uniform_cube,
    "sphere": sphere,
    "nested_spheres": nested_spheres,
    "two_boxes": two_boxes,
    "sphere_in_box": sphere_in_box,
    "smooth": smooth,
}


def make_phantom(kind: str, **params):
    """Build a phantom; returns ``(Volume, FiducialSet, LabelMap | None)``."""
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}") from None
    return builder(**params)
