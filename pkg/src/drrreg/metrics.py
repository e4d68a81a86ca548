"""Pose-estimation error metrics between a ground-truth and estimated pose.

Poses are world C-arm poses (camera-to-world). Fiducials are world points.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, ProjectionMatrix, pose_distance, project_points
from .volume import FiducialSet

SUBMILLIMETER_MM = 1.0


def _check_fiducials(X: FiducialSet):
    if X is None or len(X.points) == 0:
        raise ValueError("fiducial set is empty")


def _project(pose: Pose, k: Intrinsics, X: FiducialSet, which: str) -> np.ndarray:
    pix, valid = project_points(ProjectionMatrix.from_pose(k, pose), X.xyz)
    if not np.all(valid):
        bad = [n for n, ok in zip(X.names, valid) if not ok]
        raise ValueError(f"fiducial(s) {bad} lie at or behind the {which} camera")
    return pix


def _pixel_offsets(T: Pose, T_hat: Pose, k: Intrinsics, X: FiducialSet) -> np.ndarray:
    _check_fiducials(X)
    return _project(T, k, X, "ground-truth") - _project(T_hat, k, X, "estimated")


def mpe_px(T: Pose, T_hat: Pose, k: Intrinsics, X: FiducialSet) -> float:
    """Mean 2D reprojection distance in pixels."""
    return float(np.mean(np.linalg.norm(_pixel_offsets(T, T_hat, k, X), axis=1)))


def mpe(T: Pose, T_hat: Pose, k: Intrinsics, X: FiducialSet) -> float:
    """Mean 2D reprojection distance, converted to mm by sqrt(s_x s_y)."""
    return mpe_px(T, T_hat, k, X) * math.sqrt(k.pixel_spacing_mm[0] * k.pixel_spacing_mm[1])


def _lifted(diff: np.ndarray, k: Intrinsics) -> np.ndarray:
    # pixel offsets are directions: homogeneous third component 0
    d = np.column_stack([diff, np.zeros(len(diff))])
    return k.focal_length_mm * d @ np.linalg.inv(k.K).T


def mrpe(T: Pose, T_hat: Pose, k: Intrinsics, X: FiducialSet) -> float:
    """Mean distance of the reprojections lifted onto the detector plane (mm)."""
    lifted = _lifted(_pixel_offsets(T, T_hat, k, X), k)
    return float(np.mean(np.linalg.norm(lifted, axis=1)))


def _tre(T: Pose, T_hat: Pose, X: FiducialSet) -> np.ndarray:
    _check_fiducials(X)
    Xh = np.column_stack([X.xyz, np.ones(len(X.points))])
    diff = Xh @ (T.camera_to_world() - T_hat.camera_to_world()).T
    return np.linalg.norm(diff[:, :3], axis=1)


def mtre(T: Pose, T_hat: Pose, X: FiducialSet) -> float:
    """Mean of ||(T - T_hat) X~|| over the homogeneous fiducials."""
    return float(np.mean(_tre(T, T_hat, X)))


@dataclass
class ErrorReport:
    rot_deg: float
    arc_mm: float
    xyz_mm: float
    dgeo_mm: float
    mpe_px: float | None = None
    mpe_mm: float | None = None
    mrpe_mm: float | None = None
    mtre_mm: float | None = None
    per_fiducial: list = field(default_factory=list)

    @property
    def has_fiducials(self) -> bool:
        return self.mtre_mm is not None

    @property
    def submillimeter(self) -> bool | None:
        return None if self.mtre_mm is None else bool(self.mtre_mm < SUBMILLIMETER_MM)

    def to_json(self) -> dict:
        d = asdict(self)
        d["submillimeter"] = self.submillimeter
        if not self.has_fiducials:
            for key in ("mpe_px", "mpe_mm", "mrpe_mm", "mtre_mm", "per_fiducial"):
                d.pop(key)
        return d


def full_report(T: Pose, T_hat: Pose, k: Intrinsics, X: FiducialSet | None = None) -> ErrorReport:
    """Every metric at once; without fiducials only the pose distances are filled."""
    pd = pose_distance(T, T_hat, k.focal_length_mm)
    rep = ErrorReport(
        rot_deg=math.degrees(pd.rot_rad), arc_mm=pd.arc_mm, xyz_mm=pd.xyz_mm, dgeo_mm=pd.dgeo_mm
    )
    if X is None or len(X.points) == 0:
        return rep
    diff = _pixel_offsets(T, T_hat, k, X)
    pe_px = np.linalg.norm(diff, axis=1)
    scale = math.sqrt(k.pixel_spacing_mm[0] * k.pixel_spacing_mm[1])
    rpe = np.linalg.norm(_lifted(diff, k), axis=1)
    tre = _tre(T, T_hat, X)
    rep.mpe_px = float(np.mean(pe_px))
    rep.mpe_mm = rep.mpe_px * scale
    rep.mrpe_mm = float(np.mean(rpe))
    rep.mtre_mm = float(np.mean(tre))
    rep.per_fiducial = [
        {"name": n, "pe_px": float(a), "pe_mm": float(a) * scale, "rpe_mm": float(b), "tre_mm": float(c)}
        for n, a, b, c in zip(X.names, pe_px, rpe, tre)
    ]
    return rep


REPORT_COLUMNS = ("mpe_px", "mpe_mm", "mrpe_mm", "rot_deg", "arc_mm", "xyz_mm", "dgeo_mm", "mtre_mm", "submillimeter")


def reports_to_csv(reports: list[dict], labels: list[str] | None = None) -> str:
    """Concatenate report JSON objects into one CSV table (one row each)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("label",) + REPORT_COLUMNS)
    for i, rep in enumerate(reports):
        label = labels[i] if labels else str(i)
        w.writerow([label] + ["" if rep.get(c) is None else rep[c] for c in REPORT_COLUMNS])
    return buf.getvalue()
