"""Intensity-based 2D/3D pose recovery.

Poses handled here live in a C-arm :class:`~drrreg.geometry.Frame` (by
default centred on the volume isocenter), so Euler ``y`` is the signed
source-to-isocenter depth. The optimizer ascends the configured similarity
with Adam over a coarse-to-fine image pyramid.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .geometry import EulerPose, Frame, Intrinsics, Pose, euler_to_pose, pose_to_euler, se3_exp
from .renderer import CHARTS, GimbalLockError, Image, default_samples, make_rays, render_trilinear
from .similarity import METRICS, SimilarityConfig, metric_value_and_grad, similarity_gradient_wrt_pose
from .volume import Volume

log = logging.getLogger(__name__)

PARAM_NAMES = ("alpha", "beta", "gamma", "x", "y", "z")

# min/max per pose parameter (degrees, mm), C-arm frame
PRESETS = {
    "pelvis": {
        "alpha": (-45.0, 45.0), "beta": (-45.0, 45.0), "gamma": (-15.0, 15.0),
        "x": (-150.0, 150.0), "y": (-1000.0, -450.0), "z": (-150.0, 150.0),
    },
    "neurovasculature": {
        "alpha": (-45.0, 90.0), "beta": (-5.0, 5.0), "gamma": (-5.0, 5.0),
        "x": (-25.0, 25.0), "y": (700.0, 800.0), "z": (-25.0, 25.0),
    },
    "skull": {
        "alpha": (-125.0, 125.0), "beta": (-45.0, 45.0), "gamma": (-15.0, 15.0),
        "x": (-200.0, 200.0), "y": (-1000.0, -500.0), "z": (-200.0, 200.0),
    },
}


class RegistrationError(RuntimeError):
    """Numerical failure during refinement; carries the partial trace."""

    def __init__(self, message: str, trace: "RegistrationTrace"):
        super().__init__(message)
        self.trace = trace


def _reject_unknown(cls, d: dict):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(extra)}")


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "fixed"
    fixed_pose: EulerPose | None = None
    ranges: dict | None = None
    n_starts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fixed", "multistart"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind == "fixed" and self.fixed_pose is None:
            raise ValueError("fixed initialization requires fixed_pose")
        if int(self.n_starts) < 1:
            raise ValueError("n_starts must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.ranges is not None:
            missing = set(PARAM_NAMES) - set(self.ranges)
            extra = set(self.ranges) - set(PARAM_NAMES)
            if missing or extra:
                raise ValueError(f"ranges must name exactly {PARAM_NAMES}")
            rng = {}
            for name in PARAM_NAMES:
                lo, hi = (float(v) for v in self.ranges[name])
                if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                    raise ValueError(f"range for {name} must satisfy min <= max, got ({lo}, {hi})")
                rng[name] = (lo, hi)
            object.__setattr__(self, "ranges", rng)

    @classmethod
    def preset(cls, name: str, n_starts: int = 64, seed: int = 0) -> "InitStrategy":
        try:
            ranges = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls("multistart", None, dict(ranges), n_starts, seed)

    @classmethod
    def fixed(cls, pose: EulerPose) -> "InitStrategy":
        return cls("fixed", pose)

    def to_json(self) -> dict:
        d = {"kind": self.kind, "n_starts": self.n_starts, "seed": self.seed}
        d["fixed_pose"] = None if self.fixed_pose is None else list(self.fixed_pose.params)
        d["ranges"] = None if self.ranges is None else {k: list(v) for k, v in self.ranges.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "InitStrategy":
        _reject_unknown(cls, d)
        d = dict(d)
        if d.get("fixed_pose") is not None:
            d["fixed_pose"] = EulerPose.from_params(d["fixed_pose"])
        return cls(**d)


@dataclass(frozen=True)
class RefineConfig:
    scales: tuple = (8, 4, 2, 1)
    lr_rot_deg: float = 0.5
    lr_trans_mm: float = 2.0
    depth_lr_multiplier: float = 4.0
    lr_decay_per_scale: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_window: int = 10
    plateau_tol: float = 1e-4
    max_iters_per_scale: int = 150
    chart: str = "se3"
    n_samples: tuple | None = None
    metric: str = "mncc_gncc_mean"
    pyramid_levels: int = 4

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales or scales[-1] != 1 or any(a <= b for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be strictly decreasing and end at 1, got {scales}")
        object.__setattr__(self, "scales", scales)
        if not 0 < self.lr_decay_per_scale <= 1:
            raise ValueError("lr_decay_per_scale must lie in (0, 1]")
        for name in ("lr_rot_deg", "lr_trans_mm", "depth_lr_multiplier", "adam_eps", "plateau_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if int(self.plateau_window) < 1 or int(self.max_iters_per_scale) < 0:
            raise ValueError("plateau_window must be >= 1 and max_iters_per_scale >= 0")
        if self.chart not in CHARTS:
            raise ValueError(f"unknown chart {self.chart!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.n_samples is not None:
            ns = tuple(int(m) for m in self.n_samples)
            if len(ns) != len(scales) or min(ns) < 2:
                raise ValueError("n_samples needs one value >= 2 per scale")
            object.__setattr__(self, "n_samples", ns)

    @property
    def similarity(self) -> SimilarityConfig:
        return SimilarityConfig(self.metric, self.pyramid_levels)

    def samples_at(self, i: int, v: Volume) -> int:
        return default_samples(v) if self.n_samples is None else self.n_samples[i]

    def learning_rates(self, chart: str, scale_index: int = 0) -> np.ndarray:
        """Per-parameter step sizes in ``chart`` units at one pyramid level."""
        rot = self.lr_rot_deg if chart == "euler_zxy" else math.radians(self.lr_rot_deg)
        t = self.lr_trans_mm
        return np.array([rot, rot, rot, t, t * self.depth_lr_multiplier, t]) * self.lr_decay_per_scale**scale_index

    def to_json(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["n_samples"] = None if self.n_samples is None else list(self.n_samples)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RefineConfig":
        _reject_unknown(cls, d)
        return cls(**d)


# ----------------------------------------------------------------------
# trace
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class IterRecord:
    scale: int
    iter: int
    metric: float
    params: tuple  # Euler (alpha, beta, gamma, x, y, z) of the evaluated pose
    grad_norm: float
    ms: float


TRACE_HEADER = ("scale", "iter", "metric") + PARAM_NAMES + ("grad_norm", "ms")


@dataclass
class RegistrationTrace:
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    final_pose: Pose | None = None
    final_metric: float | None = None
    final_grad_norm: float | None = None
    termination: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in self.records:
            w.writerow([r.scale, r.iter, repr(r.metric), *(repr(float(p)) for p in r.params),
                        repr(r.grad_norm), f"{r.ms:.3f}"])
        return buf.getvalue()


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray = field(default_factory=lambda: np.zeros(6))
    v: np.ndarray = field(default_factory=lambda: np.zeros(6))
    t: int = 0


def adam_step(state: AdamState, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam ascent step; returns the new state and increment."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != (6,) or not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite or malformed gradient {g}")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    inc = np.asarray(lr, dtype=np.float64) * mhat / (np.sqrt(vhat) + eps)
    return AdamState(m, v, t), inc


def apply_increment(pose: Pose, inc, chart: str) -> Pose:
    """Move ``pose`` by a chart increment (see :class:`~drrreg.renderer.RenderGradient`)."""
    if chart == "euler_zxy":
        e = pose_to_euler(pose)
        return euler_to_pose(EulerPose.from_params(e.params + inc))
    E = se3_exp(inc)
    Rw = E[:3, :3]
    return Pose(pose.rotation @ Rw, pose.translation + Rw.T @ E[:3, 3])


# ----------------------------------------------------------------------
# pyramid helpers
# ----------------------------------------------------------------------


def downsample_image(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Block-average by an integer factor; the shape must divide evenly."""
    H, W = pixels.shape
    if H % factor or W % factor:
        raise ValueError(f"image {pixels.shape} is not divisible by {factor}")
    return pixels.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))


def _as_pose(p) -> Pose:
    return euler_to_pose(p) if isinstance(p, EulerPose) else p


def _target_pixels(target) -> np.ndarray:
    return np.asarray(target.pixels if isinstance(target, Image) else target, dtype=np.float64)


def _check_target(px, k: Intrinsics):
    if px.shape != (k.height, k.width):
        raise ValueError(f"target {px.shape} does not match detector {(k.height, k.width)}")


def score(target, v: Volume, k: Intrinsics, pose, cfg: RefineConfig = RefineConfig(),
          frame: Frame | None = None, scale: int | None = None) -> float:
    """Similarity of a render at ``pose`` to ``target`` at one pyramid scale."""
    frame = frame or Frame.carm(v.isocenter())
    px = _target_pixels(target)
    _check_target(px, k)
    i = 0 if scale is None else cfg.scales.index(scale)
    f = cfg.scales[i]
    kk = k.downsample(f)
    img = render_trilinear(v, make_rays(kk, frame.to_world(_as_pose(pose))), cfg.samples_at(i, v))
    return metric_value_and_grad(img.pixels, downsample_image(px, f), cfg.similarity, want_grad=False)[0]


# ----------------------------------------------------------------------
# refinement
# ----------------------------------------------------------------------


def refine(
    target,
    v: Volume,
    k: Intrinsics,
    init_pose: Pose | EulerPose,
    cfg: RefineConfig = RefineConfig(),
    frame: Frame | None = None,
) -> tuple[Pose, RegistrationTrace]:
    """Coarse-to-fine Adam ascent from ``init_pose``.

    Returns the best pose seen at the finest scale (in ``frame``) and the
    trace. Raises :class:`RegistrationError` on a non-finite metric.
    """
    frame = frame or Frame.carm(v.isocenter())
    px = _target_pixels(target)
    _check_target(px, k)
    pose = _as_pose(init_pose)
    trace = RegistrationTrace()
    chart = cfg.chart
    best_pose, best_val, best_gn = pose, None, None
    scale_term = []
    for si, f in enumerate(cfg.scales):
        kk = k.downsample(f)
        tgt = downsample_image(px, f)
        M = cfg.samples_at(si, v)
        state = AdamState()
        history = []
        # best iterate at this scale: (value, pose, grad norm)
        top = None
        reason = "max_iters"
        for it in range(cfg.max_iters_per_scale):
            t0 = time.perf_counter()
            try:
                val, grad, _ = similarity_gradient_wrt_pose(tgt, v, kk, pose, M, cfg.similarity, chart, frame)
            except GimbalLockError:
                trace.events.append(f"scale {f} iter {it}: gimbal lock, switched chart euler_zxy -> se3")
                log.warning("gimbal lock at scale %d iter %d; switching to the se3 chart", f, it)
                chart = "se3"
                state = AdamState()
                val, grad, _ = similarity_gradient_wrt_pose(tgt, v, kk, pose, M, cfg.similarity, chart, frame)
            gn = float(np.linalg.norm(grad))
            ms = 1000.0 * (time.perf_counter() - t0)
            trace.records.append(IterRecord(f, it, float(val), tuple(pose_to_euler(pose).params), gn, ms))
            if not (math.isfinite(val) and np.all(np.isfinite(grad))):
                trace.termination = "non-finite"
                raise RegistrationError(f"non-finite metric or gradient at scale {f} iter {it}", trace)
            if top is None or val > top[0]:
                top = (float(val), pose, gn)
            history.append(top[0])
            w = cfg.plateau_window
            if len(history) > w and history[-1] - history[-1 - w] < cfg.plateau_tol:
                reason = "plateau"
                break
            state, inc = adam_step(state, grad, cfg.learning_rates(chart, si), cfg.beta1, cfg.beta2, cfg.adam_eps)
            pose = apply_increment(pose, inc, chart)
        scale_term.append(f"{f}:{reason}")
        if top is not None:
            # warm-start the next scale from the best iterate, not the last
            pose = top[1]
            best_val, best_pose, best_gn = top
    if best_val is None:
        best_pose = pose
    trace.final_pose = best_pose
    trace.final_metric = best_val
    trace.final_grad_norm = best_gn
    trace.termination = ",".join(scale_term)
    return best_pose, trace


# ----------------------------------------------------------------------
# initialization and full pipeline
# ----------------------------------------------------------------------


def sample_poses(ranges: dict, n: int, seed: int) -> list[EulerPose]:
    rng = np.random.default_rng(seed)
    lo = np.array([ranges[p][0] for p in PARAM_NAMES])
    hi = np.array([ranges[p][1] for p in PARAM_NAMES])
    draws = lo + (hi - lo) * rng.random((n, 6))
    return [EulerPose.from_params(d) for d in draws]


def initialize(
    strategy: InitStrategy,
    target,
    v: Volume,
    k: Intrinsics,
    cfg: RefineConfig = RefineConfig(),
    frame: Frame | None = None,
) -> list[tuple[EulerPose, float]]:
    """Candidate initial poses scored at the coarsest scale, best first."""
    if strategy.kind == "fixed":
        cands = [strategy.fixed_pose]
    else:
        if not strategy.ranges:
            raise ValueError("multistart initialization requires ranges")
        cands = sample_poses(strategy.ranges, strategy.n_starts, strategy.seed)
    scored = [(c, score(target, v, k, c, cfg, frame, cfg.scales[0])) for c in cands]
    # stable sort keeps draw order among ties
    return sorted(scored, key=lambda cs: -cs[1])


@dataclass
class RegistrationResult:
    pose: Pose  # in the registration frame
    world_pose: Pose
    metric: float | None
    trace: RegistrationTrace
    report: object = None  # ErrorReport when ground truth and fiducials are known
    candidates: list = field(default_factory=list)


def register(
    target,
    v: Volume,
    k: Intrinsics,
    strategy: InitStrategy,
    cfg: RefineConfig = RefineConfig(),
    top_r: int = 1,
    frame: Frame | None = None,
    gt_world_pose: Pose | None = None,
    fiducials=None,
) -> RegistrationResult:
    """Initialize, refine the ``top_r`` best candidates, keep the best one."""
    from .metrics import full_report

    frame = frame or Frame.carm(v.isocenter())
    n = 1 if strategy.kind == "fixed" else strategy.n_starts
    if not 1 <= top_r <= n:
        raise ValueError(f"top_r must lie in [1, {n}], got {top_r}")
    cands = initialize(strategy, target, v, k, cfg, frame)
    best = None
    for init, s in cands[:top_r]:
        pose, trace = refine(target, v, k, init, cfg, frame)
        m = trace.final_metric if trace.final_metric is not None else -math.inf
        gn = trace.final_grad_norm if trace.final_grad_norm is not None else math.inf
        if best is None or (m, -gn) > (best[0], -best[1]):
            best = (m, gn, pose, trace)
    m, _, pose, trace = best
    world = frame.to_world(pose)
    report = None
    if gt_world_pose is not None:
        report = full_report(gt_world_pose, world, k, fiducials)
    return RegistrationResult(pose, world, trace.final_metric, trace, report, cands)
