"""Synthetic radiograph rendering (Siddon and trilinear quadrature)."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import _kernels
from .geometry import (
    EulerPose,
    Frame,
    Intrinsics,
    Pose,
    euler_rotation_derivatives,
    euler_to_pose,
    pose_to_euler,
    skew,
)
from .volume import LabelMap, Volume, mask_structures

CHARTS = ("euler_zxy", "se3")
METHODS = ("siddon", "trilinear")


class GimbalLockError(ValueError):
    """Euler chart derivatives are undefined at |beta| = 90 degrees."""


def set_threads(n: int | None) -> None:
    """Bound the renderer's worker threads (results do not depend on it)."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@dataclass(frozen=True, eq=False)
class Image:
    """Log-domain line integrals on the detector, one value per pixel."""

    pixels: np.ndarray
    intrinsics: Intrinsics | None = None
    pose: Pose | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("image pixels must be 2D")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite pixels")
        if self.intrinsics is not None and px.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"pixels {px.shape} do not match detector "
                f"{(self.intrinsics.height, self.intrinsics.width)}"
            )
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class RayBundle:
    source: np.ndarray  # (3,) world mm
    targets: np.ndarray  # (H, W, 3) world mm
    intrinsics: Intrinsics | None = None
    pose: Pose | None = None


@dataclass(frozen=True, eq=False)
class RenderGradient:
    """Per-pixel derivatives ``d_pixels[h, w, j] = dI[h, w] / d theta_j``.

    For ``euler_zxy`` theta is (alpha, beta, gamma, x, y, z) in degrees and
    mm. For ``se3`` theta is a twist (omega, v) in radians and mm applied as
    ``R exp(xi) Trans(t)`` (rotation about the isocenter).
    """

    d_pixels: np.ndarray
    chart: str


def make_rays(intrinsics: Intrinsics, pose: Pose) -> RayBundle:
    """Source and pixel-centre targets of ``pose`` in world coordinates."""
    x, y = intrinsics.image_plane_coords()
    q = np.empty((intrinsics.height, intrinsics.width, 3))
    q[..., 0] = x[None, :]
    q[..., 1] = y[:, None]
    q[..., 2] = intrinsics.focal_length_mm
    return RayBundle(pose.apply(np.zeros(3)), pose.apply(q), intrinsics, pose)


def _vol_args(v: Volume):
    return v.values, np.asarray(v.origin, dtype=np.float64), np.asarray(v.spacing, dtype=np.float64)


def _image(pixels, rays: RayBundle) -> Image:
    return Image(pixels, rays.intrinsics, rays.pose)


def default_samples(v: Volume) -> int:
    return 2 * max(v.shape)


def render_siddon(v: Volume, rays: RayBundle) -> Image:
    """Exact radiological path through piecewise-constant voxels."""
    vol, o, sp = _vol_args(v)
    px = _kernels.siddon(vol, o, sp, np.ascontiguousarray(rays.source, dtype=np.float64),
                         np.ascontiguousarray(rays.targets, dtype=np.float64))
    return _image(px, rays)


def render_trilinear(v: Volume, rays: RayBundle, n_samples: int | None = None) -> Image:
    """Trapezoid quadrature of trilinearly interpolated attenuation.

    ``n_samples`` evenly spaced points cover the ray's intersection with the
    volume box; the endpoint weights are halved.
    """
    M = default_samples(v) if n_samples is None else int(n_samples)
    if M < 2:
        raise ValueError(f"n_samples must be at least 2, got {n_samples}")
    vol, o, sp = _vol_args(v)
    px = _kernels.trilinear(vol, o, sp, np.ascontiguousarray(rays.source, dtype=np.float64),
                            np.ascontiguousarray(rays.targets, dtype=np.float64), M)
    return _image(px, rays)


def render(v: Volume, rays: RayBundle, method: str = "trilinear", n_samples: int | None = None) -> Image:
    if method == "siddon":
        return render_siddon(v, rays)
    if method == "trilinear":
        return render_trilinear(v, rays, n_samples)
    raise ValueError(f"unknown render method {method!r}")


def chart_linearization(pose: Pose | EulerPose, chart: str):
    """First-order action of the chart on C-arm-frame points.

    For a camera point reoriented into the C-arm frame, ``w = F q + t``, the
    (pre-isocenter) world point is ``R w``; its derivative along parameter
    ``j`` is ``A[j] @ w + b[j]``. Returns ``(A, b)`` of shapes (6, 3, 3) and
    (6, 3).
    """
    if chart not in CHARTS:
        raise ValueError(f"unknown chart {chart!r}; expected one of {CHARTS}")
    if isinstance(pose, EulerPose):
        e, pose = pose, euler_to_pose(pose)
    else:
        e = None
    R = pose.rotation
    A = np.zeros((6, 3, 3))
    b = np.zeros((6, 3))
    if chart == "euler_zxy":
        e = e if e is not None else pose_to_euler(pose)
        if e.gimbal_lock or abs(np.cos(np.radians(e.beta_deg))) < 1e-9:
            raise GimbalLockError("Euler chart is singular at |beta| = 90 deg; use the se3 chart")
        A[:3] = euler_rotation_derivatives(e.alpha_deg, e.beta_deg, e.gamma_deg)
    else:
        for j in range(3):
            A[j] = R @ skew(np.eye(3)[j])
    b[3:] = R.T  # rows are R e_k
    return A, b


def render_trilinear_with_grad(
    v: Volume,
    intrinsics: Intrinsics,
    pose: Pose | EulerPose,
    n_samples: int | None = None,
    chart: str = "se3",
    frame: Frame | None = None,
) -> tuple[Image, RenderGradient]:
    """Trilinear render plus exact pose derivatives of every pixel.

    ``pose`` is given in ``frame`` (identity frame: world coordinates); the
    rendered world pose is ``frame.to_world(pose)``.
    """
    frame = frame or Frame.identity()
    M = default_samples(v) if n_samples is None else int(n_samples)
    if M < 2:
        raise ValueError(f"n_samples must be at least 2, got {n_samples}")
    A, b = chart_linearization(pose, chart)
    T = euler_to_pose(pose) if isinstance(pose, EulerPose) else pose
    world = frame.to_world(T)
    rays = make_rays(intrinsics, world)
    vol, o, sp = _vol_args(v)
    img, g_src, g_tgt = _kernels.trilinear_grad(
        vol, o, sp, np.ascontiguousarray(rays.source), np.ascontiguousarray(rays.targets), M
    )
    # C-arm frame points of the source and each target before rotation
    t = T.translation
    w = (rays.targets - frame.isocenter) @ T.rotation  # = F q + t
    ds = A @ t + b  # (6, 3)
    dp = np.einsum("jab,hwb->hwja", A, w) + b  # (H, W, 6, 3)
    d = np.einsum("hwk,hwjk->hwj", g_tgt, dp) + g_src @ ds.T
    return _image(img, rays), RenderGradient(d, chart)


def to_beer_lambert(img: Image, I0: float = 1.0) -> Image:
    if not I0 > 0:
        raise ValueError("I0 must be positive")
    return Image(I0 * np.exp(-img.pixels), img.intrinsics, img.pose)


def from_beer_lambert(img: Image, I0: float = 1.0) -> Image:
    if not I0 > 0:
        raise ValueError("I0 must be positive")
    if np.any(img.pixels <= 0):
        raise ValueError("transmitted intensities must be positive")
    return Image(np.log(I0) - np.log(img.pixels), img.intrinsics, img.pose)


def render_structure(
    v: Volume, labels: LabelMap, keep, rays: RayBundle, method: str = "trilinear", n_samples: int | None = None
) -> Image:
    """Render only the voxels whose label is in ``keep``."""
    return render(mask_structures(v, labels, keep), rays, method, n_samples)
