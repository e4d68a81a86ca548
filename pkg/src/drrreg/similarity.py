"""Image similarity metrics and their gradients.

Every metric here is a similarity in [-1, 1] (higher is better). The
``*_value_and_grad`` helpers differentiate with respect to the first
(moving) image; the second is held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import EulerPose, Frame, Intrinsics, Pose
from .renderer import Image, render_trilinear_with_grad
from .volume import Volume

METRICS = ("ncc", "mncc", "gncc", "mncc_gncc_mean")

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class SimilarityConfig:
    metric: str = "mncc_gncc_mean"
    pyramid_levels: int = 4
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if int(self.pyramid_levels) != self.pyramid_levels or self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be an integer >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _px(a) -> np.ndarray:
    px = a.pixels if isinstance(a, Image) else a
    return np.asarray(px, dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------
# NCC
# ----------------------------------------------------------------------


def _ncc_vg(a, b, eps, want_grad=True):
    n = a.size
    ac = a - a.mean()
    bc = b - b.mean()
    sa = math.sqrt(float(np.dot(ac.ravel(), ac.ravel())) / n)
    sb = math.sqrt(float(np.dot(bc.ravel(), bc.ravel())) / n)
    num = float(np.dot(ac.ravel(), bc.ravel())) / n
    # eps floors the deviation product; it only matters for (near) constant images
    floored = sa * sb < eps
    den = eps if floored else sa * sb
    val = num / den
    if not want_grad:
        return min(1.0, max(-1.0, val)), None
    g = bc / (n * den)
    if not floored:
        g = g - (num * sb / (den * den)) * ac / (n * sa)
    return min(1.0, max(-1.0, val)), g


def ncc(a, b, epsilon: float = 1e-8) -> float:
    """Pearson correlation of two images; 0 when both are constant."""
    a, b = _px(a), _px(b)
    _same_shape(a, b)
    return _ncc_vg(a, b, epsilon, want_grad=False)[0]


def is_degenerate(a, b) -> bool:
    """True when both images are constant, where NCC is defined as 0."""
    a, b = _px(a), _px(b)
    return bool(np.ptp(a) == 0 and np.ptp(b) == 0)


# ----------------------------------------------------------------------
# pooling pyramid
# ----------------------------------------------------------------------


def pool2(a: np.ndarray) -> np.ndarray:
    """Factor-2 average pooling; odd sizes are first edge-padded."""
    H, W = a.shape
    if H % 2 or W % 2:
        a = np.pad(a, ((0, H % 2), (0, W % 2)), mode="edge")
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def _pool2_adjoint(g: np.ndarray, shape) -> np.ndarray:
    H, W = shape
    up = 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    out = up[:H, :W].copy()
    if H % 2:
        out[-1, :] += up[H, :W]
    if W % 2:
        out[:, -1] += up[:H, W]
    if H % 2 and W % 2:
        out[-1, -1] += up[H, W]
    return out


def pool(a: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool by a power-of-two ``factor`` (repeated factor-2 steps)."""
    factor = int(factor)
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"pooling factor must be a power of two, got {factor}")
    while factor > 1:
        a = pool2(a)
        factor //= 2
    return a


def _check_levels(shape, L):
    if L > 1 and L > math.log2(min(shape)):
        raise ValueError(f"{L} pyramid levels exceed log2 of the smallest image dimension {min(shape)}")


def mncc_value_and_grad(a, b, levels: int = 4, epsilon: float = 1e-8, want_grad=True):
    a, b = _px(a), _px(b)
    _same_shape(a, b)
    _check_levels(a.shape, levels)
    shapes = []
    vals = []
    grads = []
    for _ in range(levels):
        v, g = _ncc_vg(a, b, epsilon, want_grad)
        vals.append(v)
        grads.append(g)
        shapes.append(a.shape)
        a, b = pool2(a), pool2(b)
    value = float(np.mean(vals))
    if not want_grad:
        return value, None
    g = grads[-1]
    for lvl in range(levels - 2, -1, -1):
        g = grads[lvl] + _pool2_adjoint(g, shapes[lvl])
    return value, g / levels


def mncc(a, b, levels: int = 4, epsilon: float = 1e-8) -> float:
    """Mean NCC over a ``levels``-deep average-pooling pyramid."""
    return mncc_value_and_grad(a, b, levels, epsilon, want_grad=False)[0]


# ----------------------------------------------------------------------
# gradient NCC
# ----------------------------------------------------------------------


def _correlate3(a, k):
    H, W = a.shape
    ap = np.pad(a, 1, mode="edge")
    out = np.zeros((H, W))
    for di in range(3):
        for dj in range(3):
            if k[di, dj]:
                out += k[di, dj] * ap[di : di + H, dj : dj + W]
    return out


def _correlate3_adjoint(g, k):
    H, W = g.shape
    gp = np.zeros((H + 2, W + 2))
    for di in range(3):
        for dj in range(3):
            if k[di, dj]:
                gp[di : di + H, dj : dj + W] += k[di, dj] * g
    # fold the replicated border back onto the edge pixels
    gp[1, :] += gp[0, :]
    gp[-2, :] += gp[-1, :]
    gp[:, 1] += gp[:, 0]
    gp[:, -2] += gp[:, -1]
    return gp[1:-1, 1:-1]


def sobel(a) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel responses (x along columns, y along rows), replicate border."""
    a = _px(a)
    return _correlate3(a, SOBEL_X), _correlate3(a, SOBEL_Y)


def gncc_value_and_grad(a, b, epsilon: float = 1e-8, want_grad=True):
    a, b = _px(a), _px(b)
    _same_shape(a, b)
    if min(a.shape) < 3:
        raise ValueError(f"gradient NCC needs images of at least 3x3, got {a.shape}")
    vx, gx = _ncc_vg(_correlate3(a, SOBEL_X), _correlate3(b, SOBEL_X), epsilon, want_grad)
    vy, gy = _ncc_vg(_correlate3(a, SOBEL_Y), _correlate3(b, SOBEL_Y), epsilon, want_grad)
    value = 0.5 * (vx + vy)
    if not want_grad:
        return value, None
    return value, 0.5 * (_correlate3_adjoint(gx, SOBEL_X) + _correlate3_adjoint(gy, SOBEL_Y))


def gncc(a, b, epsilon: float = 1e-8) -> float:
    """Mean NCC of the horizontal and vertical Sobel images."""
    return gncc_value_and_grad(a, b, epsilon, want_grad=False)[0]


# ----------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------


def metric_value_and_grad(moving, fixed, cfg: SimilarityConfig = SimilarityConfig(), want_grad=True):
    """Configured similarity and its gradient w.r.t. ``moving`` pixels."""
    a, b = _px(moving), _px(fixed)
    eps = cfg.epsilon
    if cfg.metric == "ncc":
        _same_shape(a, b)
        return _ncc_vg(a, b, eps, want_grad)
    if cfg.metric == "mncc":
        return mncc_value_and_grad(a, b, cfg.pyramid_levels, eps, want_grad)
    if cfg.metric == "gncc":
        return gncc_value_and_grad(a, b, eps, want_grad)
    vm, gm = mncc_value_and_grad(a, b, cfg.pyramid_levels, eps, want_grad)
    vg, gg = gncc_value_and_grad(a, b, eps, want_grad)
    value = 0.5 * (vm + vg)
    return value, (0.5 * (gm + gg) if want_grad else None)


def combined(a, b, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    return metric_value_and_grad(a, b, cfg, want_grad=False)[0]


def similarity_gradient_wrt_pose(
    target,
    v: Volume,
    intrinsics: Intrinsics,
    pose: Pose | EulerPose,
    n_samples: int | None = None,
    cfg: SimilarityConfig = SimilarityConfig(),
    chart: str = "se3",
    frame: Frame | None = None,
) -> tuple[float, np.ndarray, Image]:
    """Metric between a render at ``pose`` and ``target`` and its pose gradient.

    Returns ``(value, gradient (6,), rendered image)``; the gradient is in
    the units of ``chart`` (see :class:`~drrreg.renderer.RenderGradient`).
    """
    img, rg = render_trilinear_with_grad(v, intrinsics, pose, n_samples, chart, frame)
    value, dimg = metric_value_and_grad(img.pixels, _px(target), cfg)
    grad = np.einsum("hw,hwj->j", dimg, rg.d_pixels)
    return value, grad, img


# ----------------------------------------------------------------------
# landscapes
# ----------------------------------------------------------------------

LANDSCAPE_AXES = ("alpha", "beta", "gamma", "x", "y", "z")


def landscape(
    target,
    v: Volume,
    intrinsics: Intrinsics,
    center: EulerPose,
    axes=LANDSCAPE_AXES,
    rot_range_deg: float = 60.0,
    trans_range_mm: float = 100.0,
    steps: int = 121,
    cfg: SimilarityConfig = SimilarityConfig(),
    frame: Frame | None = None,
    n_samples: int | None = None,
) -> list[tuple[str, float, str, float]]:
    """One-parameter sweeps of the metric around ``center``.

    Each axis is swept over ``steps`` evenly spaced offsets in
    ``[-range, range]`` while the other five parameters stay fixed. Returns
    rows ``(axis, offset, metric name, value)``.
    """
    from .renderer import make_rays, render_trilinear

    if steps < 1:
        raise ValueError("steps must be >= 1")
    frame = frame or Frame.identity()
    fixed = _px(target)
    rows = []
    for axis in axes:
        if axis not in LANDSCAPE_AXES:
            raise ValueError(f"unknown axis {axis!r}; expected one of {LANDSCAPE_AXES}")
        j = LANDSCAPE_AXES.index(axis)
        span = rot_range_deg if j < 3 else trans_range_mm
        offsets = np.linspace(-span, span, steps) if steps > 1 else np.zeros(1)
        for off in offsets:
            p = center.params.copy()
            p[j] += off
            world = frame.to_world(EulerPose.from_params(p))
            img = render_trilinear(v, make_rays(intrinsics, world), n_samples)
            value = metric_value_and_grad(img.pixels, fixed, cfg, want_grad=False)[0]
            rows.append((axis, float(off), cfg.metric, float(value)))
    return rows


def landscape_csv(rows) -> str:
    lines = ["axis,offset,metric,value"]
    lines += [f"{a},{o!r},{m},{val!r}" for a, o, m, val in rows]
    return "\n".join(lines) + "\n"
