"""C-arm geometry: intrinsics, rigid poses, rotation charts and projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

ORTHO_TOL = 1e-9
GIMBAL_TOL = 1e-9
POSE_PARAMETERIZATIONS = ("euler_zxy_deg", "matrix")


def _frozen(a, shape) -> np.ndarray:
    out = np.array(a, dtype=np.float64).reshape(shape)
    out.setflags(write=False)
    return out


# ----------------------------------------------------------------------
# Intrinsics
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    """Internal calibration of a C-arm modelled as a pinhole camera.

    Lengths are millimetres. ``optical_center_mm`` is the principal point
    offset (o_x, o_y) on the detector plane.
    """

    focal_length_mm: float
    height: int
    width: int
    pixel_spacing_mm: tuple[float, float] = (1.0, 1.0)
    optical_center_mm: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        sx, sy = (float(v) for v in self.pixel_spacing_mm)
        ox, oy = (float(v) for v in self.optical_center_mm)
        object.__setattr__(self, "focal_length_mm", float(self.focal_length_mm))
        object.__setattr__(self, "pixel_spacing_mm", (sx, sy))
        object.__setattr__(self, "optical_center_mm", (ox, oy))
        if not all(math.isfinite(v) for v in (self.focal_length_mm, sx, sy, ox, oy)):
            raise ValueError("intrinsics must be finite")
        if self.focal_length_mm <= 0 or sx <= 0 or sy <= 0:
            raise ValueError("focal length and pixel spacing must be positive")
        if int(self.height) != self.height or int(self.width) != self.width:
            raise ValueError("detector size must be integral")
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))
        if self.height < 1 or self.width < 1:
            raise ValueError("detector size must be at least 1x1")

    @property
    def pixel_matrix(self) -> np.ndarray:
        """Image-plane millimetres to pixel coordinates."""
        sx, sy = self.pixel_spacing_mm
        return np.array(
            [[1.0 / sx, 0.0, self.width / 2.0], [0.0, 1.0 / sy, self.height / 2.0], [0.0, 0.0, 1.0]]
        )

    @property
    def camera_matrix(self) -> np.ndarray:
        """Camera coordinates to image-plane millimetres."""
        f = self.focal_length_mm
        ox, oy = self.optical_center_mm
        return np.array([[f, 0.0, ox], [0.0, f, oy], [0.0, 0.0, 1.0]])

    @property
    def K(self) -> np.ndarray:
        return self.pixel_matrix @ self.camera_matrix

    def image_plane_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical detector coordinates (mm) of every pixel centre.

        Returns ``(x, y)`` with shapes ``(W,)`` and ``(H,)``.
        """
        sx, sy = self.pixel_spacing_mm
        ox, oy = self.optical_center_mm
        x = (np.arange(self.width) + 0.5 - self.width / 2.0) * sx - ox
        y = (np.arange(self.height) + 0.5 - self.height / 2.0) * sy - oy
        return x, y

    def downsample(self, factor: int) -> "Intrinsics":
        """Intrinsics of the detector binned by ``factor`` in both directions.

        Focal length and optical centre are unchanged so the physical
        detector footprint stays the same.
        """
        factor = int(factor)
        if factor < 1 or self.height % factor or self.width % factor:
            raise ValueError(
                f"detector {self.height}x{self.width} is not divisible by factor {factor}"
            )
        sx, sy = self.pixel_spacing_mm
        return Intrinsics(
            self.focal_length_mm,
            self.height // factor,
            self.width // factor,
            (sx * factor, sy * factor),
            self.optical_center_mm,
        )

    def to_dict(self) -> dict:
        return {
            "focal_length_mm": self.focal_length_mm,
            "height": self.height,
            "width": self.width,
            "pixel_spacing_mm": list(self.pixel_spacing_mm),
            "optical_center_mm": list(self.optical_center_mm),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        known = {"focal_length_mm", "height", "width", "pixel_spacing_mm", "optical_center_mm"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown intrinsics keys: {sorted(unknown)}")
        return cls(
            d["focal_length_mm"],
            d["height"],
            d["width"],
            tuple(d.get("pixel_spacing_mm", (1.0, 1.0))),
            tuple(d.get("optical_center_mm", (0.0, 0.0))),
        )


# ----------------------------------------------------------------------
# Rotations
# ----------------------------------------------------------------------


def rot_x(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drot_x(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _drot_y(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drot_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_rotation(alpha_deg: float, beta_deg: float, gamma_deg: float) -> np.ndarray:
    """C-arm rotation R_z(alpha) R_x(beta) R_y(gamma), angles in degrees."""
    a, b, g = np.radians([alpha_deg, beta_deg, gamma_deg])
    return rot_z(a) @ rot_x(b) @ rot_y(g)


def euler_rotation_derivatives(alpha_deg, beta_deg, gamma_deg) -> np.ndarray:
    """Partials of :func:`euler_rotation` per degree, shape ``(3, 3, 3)``."""
    a, b, g = np.radians([alpha_deg, beta_deg, gamma_deg])
    rz, rx, ry = rot_z(a), rot_x(b), rot_y(g)
    k = math.pi / 180.0
    return k * np.stack(
        [_drot_z(a) @ rx @ ry, rz @ _drot_x(b) @ ry, rz @ rx @ _drot_y(g)]
    )


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula; ``w`` is an axis-angle vector in radians."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * W
        + ((1.0 - math.cos(theta)) / theta**2) * W @ W
    )


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_t = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.acos(cos_t)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if math.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        B = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / math.sqrt(max(B[i, i], 1e-300))
        if np.dot(axis, v) < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * math.sin(theta)) * v


def _so3_left_jacobian(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + ((1.0 - math.cos(theta)) / theta**2) * W
        + ((theta - math.sin(theta)) / theta**3) * W @ W
    )


def se3_exp(xi) -> np.ndarray:
    """Exponential of a twist ``(omega, v)`` as a 4x4 homogeneous matrix."""
    xi = np.asarray(xi, dtype=np.float64)
    w, v = xi[:3], xi[3:]
    T = np.eye(4)
    T[:3, :3] = so3_exp(w)
    T[:3, 3] = _so3_left_jacobian(w) @ v
    return T


def se3_log(T) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    w = so3_log(T[:3, :3])
    v = np.linalg.solve(_so3_left_jacobian(w), T[:3, 3])
    return np.concatenate([w, v])


# ----------------------------------------------------------------------
# Poses
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid camera-to-world transform.

    The homogeneous matrix is ``[[R, R t], [0, 1]]``: the camera is first
    offset by ``t`` and the result rotated by ``R``. Use
    :meth:`from_matrix` to build a pose from any 4x4 rigid matrix.
    """

    rotation: np.ndarray
    translation: np.ndarray
    # world translation column R t; kept exactly when built from a matrix
    world_column: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        c = R @ t if self.world_column is None else self.world_column
        object.__setattr__(self, "world_column", _frozen(c, (3,)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        """Pose whose camera-to-world matrix is ``T`` (any rigid 4x4)."""
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4) or not np.allclose(T[3], [0, 0, 0, 1], atol=0, rtol=0):
            raise ValueError("expected a 4x4 rigid matrix with last row [0, 0, 0, 1]")
        R = T[:3, :3]
        return cls(R, R.T @ T[:3, 3], T[:3, 3])

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates (the X-ray source)."""
        return self.world_column

    def camera_to_world(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.world_column
        return T

    def world_to_camera(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.T
        T[:3, 3] = -self.translation
        return T

    def inverse(self) -> "Pose":
        return Pose.from_matrix(self.world_to_camera())

    def __matmul__(self, other: "Pose") -> "Pose":
        R = self.rotation @ other.rotation
        c = self.rotation @ other.center + self.center
        return Pose(R, R.T @ c)

    def apply(self, points) -> np.ndarray:
        """Map camera-frame points (..., 3) to world coordinates."""
        p = np.asarray(points, dtype=np.float64)
        return (p + self.translation) @ self.rotation.T

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.camera_to_world(), other.camera_to_world(), atol=atol, rtol=0))


@dataclass(frozen=True)
class EulerPose:
    """C-arm pose in the commercial Euler convention (degrees / mm).

    alpha is LAO/RAO, beta CRA/CAU, gamma the in-plane rotation; ``y`` is the
    source-to-isocenter depth. ``partial`` marks poses where only some
    degrees of freedom are known (e.g. read from acquisition metadata).
    """

    alpha_deg: float = 0.0
    beta_deg: float = 0.0
    gamma_deg: float = 0.0
    x_mm: float = 0.0
    y_mm: float = 0.0
    z_mm: float = 0.0
    gimbal_lock: bool = False
    partial: bool = False

    def __post_init__(self):
        for name in ("alpha_deg", "beta_deg", "gamma_deg", "x_mm", "y_mm", "z_mm"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def params(self) -> np.ndarray:
        return np.array(
            [self.alpha_deg, self.beta_deg, self.gamma_deg, self.x_mm, self.y_mm, self.z_mm]
        )

    @classmethod
    def from_params(cls, p, **flags) -> "EulerPose":
        return cls(*(float(v) for v in p), **flags)

    def to_pose(self) -> Pose:
        return euler_to_pose(self)


def euler_to_pose(e: EulerPose) -> Pose:
    params = e.params
    if not np.all(np.isfinite(params)):
        raise ValueError(f"non-finite Euler pose parameters: {params.tolist()}")
    R = euler_rotation(*params[:3])
    return Pose(R, params[3:])


def pose_to_euler(p: Pose) -> EulerPose:
    """Decompose ``p`` into the R_z R_x R_y convention.

    Returns beta in [-90, 90]. When cos(beta) vanishes gamma is fixed to 0
    and ``gimbal_lock`` is set.
    """
    R = p.rotation
    cb = math.hypot(R[2, 0], R[2, 2])
    beta = math.atan2(R[2, 1], cb)
    if cb < GIMBAL_TOL:
        alpha = math.atan2(R[1, 0], R[0, 0])
        gamma = 0.0
        locked = True
    else:
        alpha = math.atan2(-R[0, 1], R[1, 1])
        gamma = math.atan2(-R[2, 0], R[2, 2])
        locked = False
    x, y, z = p.translation
    return EulerPose(
        math.degrees(alpha), math.degrees(beta), math.degrees(gamma), x, y, z, gimbal_lock=locked
    )


# ----------------------------------------------------------------------
# World frame
# ----------------------------------------------------------------------

# Camera depth (+z) to world +y, camera +x to world +x, camera +y to world -z.
CARM_REORIENT = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
CARM_REORIENT.setflags(write=False)


@dataclass(frozen=True, eq=False)
class Frame:
    """Placement of C-arm poses in volume world coordinates.

    ``to_world(T)`` is ``Trans(isocenter) @ T @ Rot(reorient)``: camera
    points are first reoriented (so the C-arm depth runs along world y),
    then moved by the C-arm pose, then shifted to the volume isocenter.
    """

    isocenter: np.ndarray = field(default_factory=lambda: np.zeros(3))
    reorient: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "isocenter", _frozen(self.isocenter, (3,)))
        object.__setattr__(self, "reorient", _frozen(self.reorient, (3, 3)))

    @classmethod
    def identity(cls) -> "Frame":
        return cls()

    @classmethod
    def carm(cls, isocenter=(0.0, 0.0, 0.0)) -> "Frame":
        return cls(np.asarray(isocenter, dtype=np.float64), CARM_REORIENT)

    def to_world(self, pose: Pose | EulerPose) -> Pose:
        if isinstance(pose, EulerPose):
            pose = euler_to_pose(pose)
        M = pose.camera_to_world()
        F = np.eye(4)
        F[:3, :3] = self.reorient
        M = M @ F
        M[:3, 3] += self.isocenter
        return Pose.from_matrix(M)

    def from_world(self, world: Pose) -> Pose:
        M = world.camera_to_world().copy()
        M[:3, 3] -= self.isocenter
        F = np.eye(4)
        F[:3, :3] = self.reorient.T
        return Pose.from_matrix(M @ F)


# ----------------------------------------------------------------------
# Projection
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix, (3, 4)))

    @classmethod
    def from_pose(cls, intrinsics: Intrinsics, pose: Pose) -> "ProjectionMatrix":
        Rt = np.hstack([pose.rotation.T, -pose.translation[:, None]])
        return cls(intrinsics.K @ Rt)


def project_points(pi: ProjectionMatrix, points, homogeneous: bool = False):
    """Project world points to continuous pixel coordinates.

    ``points`` is ``(n, 3)``, or ``(n, 4)`` with ``homogeneous=True``.
    Returns ``(pixels, valid)``; points whose projected depth is not
    positive (at or behind the source plane) are flagged invalid and their
    pixels set to NaN.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if not homogeneous:
        X = np.hstack([X, np.ones((len(X), 1))])
    elif X.shape[1] != 4:
        raise ValueError("homogeneous points must have 4 components")
    xyz = X @ pi.matrix.T
    z = xyz[:, 2]
    w = X[:, 3]
    # depth sign is measured relative to the homogeneous scale
    valid = (np.abs(z) > 1e-9 * np.maximum(np.abs(w), 1e-300)) & (z * w > 0)
    pix = np.full((len(X), 2), np.nan)
    pix[valid] = xyz[valid, :2] / z[valid, None]
    return pix, valid


# ----------------------------------------------------------------------
# Pose distances
# ----------------------------------------------------------------------


class PoseDistance(NamedTuple):
    rot_rad: float
    arc_mm: float
    xyz_mm: float
    dgeo_mm: float


def pose_distance(a: Pose, b: Pose, focal_length_mm: float) -> PoseDistance:
    if focal_length_mm <= 0:
        raise ValueError("focal length must be positive")
    M = a.rotation.T @ b.rotation
    # atan2 keeps small angles accurate where acos of the trace would not
    c = (np.trace(M) - 1.0) / 2.0
    s = 0.5 * float(np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]))
    rot = math.atan2(s, c)
    arc = focal_length_mm / 2.0 * rot
    xyz = float(np.linalg.norm(a.translation - b.translation))
    return PoseDistance(rot, arc, xyz, math.sqrt(arc * arc + xyz * xyz))


# ----------------------------------------------------------------------
# JSON
# ----------------------------------------------------------------------


def pose_to_json(pose: Pose | EulerPose) -> dict:
    if isinstance(pose, EulerPose):
        d = {
            "parameterization": "euler_zxy_deg",
            "rotation": [pose.alpha_deg, pose.beta_deg, pose.gamma_deg],
            "translation": [pose.x_mm, pose.y_mm, pose.z_mm],
        }
        if pose.partial:
            d["partial"] = True
        return d
    return {"parameterization": "matrix", "matrix": pose.camera_to_world().tolist()}


def pose_from_json(d: dict) -> Pose | EulerPose:
    kind = d.get("parameterization")
    if kind == "euler_zxy_deg":
        rot, trans = d["rotation"], d["translation"]
        if len(rot) != 3 or len(trans) != 3:
            raise ValueError("euler pose needs 3 rotation and 3 translation values")
        return EulerPose(*map(float, rot), *map(float, trans), partial=bool(d.get("partial", False)))
    if kind == "matrix":
        return Pose.from_matrix(np.asarray(d["matrix"], dtype=np.float64))
    raise ValueError(f"unknown pose parameterization {kind!r}; expected one of {POSE_PARAMETERIZATIONS}")
