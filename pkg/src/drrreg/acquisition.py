"""Adapters from clinical acquisitions to the engine's canonical geometry.

Two jobs: resample an image taken with one detector calibration onto the
canonical detector used for rendering, and turn C-arm positioner metadata
into a partial initial pose.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import EulerPose, Intrinsics
from .io import FormatError, atomic_write_bytes, read_json
from .renderer import Image

SIGN_CONVENTIONS = ("negative_y", "positive_y")


class ResampleWarning(UserWarning):
    """The canonical detector does not overlap the source detector."""


# ----------------------------------------------------------------------
# canonicalization
# ----------------------------------------------------------------------


def _source_index(k_src: Intrinsics, k_dst: Intrinsics):
    """Continuous source pixel indices of each destination pixel centre."""
    x, y = k_dst.image_plane_coords()
    sx, sy = k_src.pixel_spacing_mm
    ox, oy = k_src.optical_center_mm
    u = (x + ox) / sx + k_src.width / 2.0 - 0.5
    v = (y + oy) / sy + k_src.height / 2.0 - 0.5
    return u, v


def _axis_weights(c, n):
    """Bilinear taps along one axis; positions outside the extent get weight 0."""
    inside = (c >= -0.5) & (c <= n - 0.5)
    cc = np.clip(c, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(cc).astype(np.int64), max(n - 2, 0))
    frac = cc - i0
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, frac, inside


def canonicalize(img: Image, k_canon: Intrinsics, k_src: Intrinsics | None = None) -> Image:
    """Resample ``img`` onto the canonical detector ``k_canon``.

    Every output pixel takes the bilinear value at the source location with
    the same physical detector coordinates. Source samples are edge-clamped
    inside the source footprint; outside it the output is 0. The focal
    lengths must agree since resampling cannot change perspective.
    """
    k_src = k_src or img.intrinsics
    if k_src is None:
        raise ValueError("source intrinsics are required")
    px = np.asarray(img.pixels, dtype=np.float64)
    if px.shape != (k_src.height, k_src.width):
        raise ValueError(f"image {px.shape} does not match source detector {(k_src.height, k_src.width)}")
    if k_src.focal_length_mm != k_canon.focal_length_mm:
        raise ValueError(
            f"focal length mismatch: source {k_src.focal_length_mm} mm vs canonical {k_canon.focal_length_mm} mm"
        )
    if k_src == k_canon:
        return Image(px.copy(), k_canon, img.pose)
    u, v = _source_index(k_src, k_canon)
    u0, u1, fu, iu = _axis_weights(u, k_src.width)
    v0, v1, fv, iv = _axis_weights(v, k_src.height)
    if not (iu.any() and iv.any()):
        warnings.warn("canonical detector does not overlap the source image", ResampleWarning, stacklevel=2)
        return Image(np.zeros((k_canon.height, k_canon.width)), k_canon, img.pose)
    fu = fu[None, :]
    fv = fv[:, None]
    top = px[v0][:, u0] * (1 - fu) + px[v0][:, u1] * fu
    bot = px[v1][:, u0] * (1 - fu) + px[v1][:, u1] * fu
    out = top * (1 - fv) + bot * fv
    out[~(iv[:, None] & iu[None, :])] = 0.0
    return Image(out, k_canon, img.pose)


def overlap_mask(k_src: Intrinsics, k_canon: Intrinsics) -> np.ndarray:
    """Canonical pixels whose centre falls inside the source footprint."""
    u, v = _source_index(k_src, k_canon)
    iu = (u >= -0.5) & (u <= k_src.width - 0.5)
    iv = (v >= -0.5) & (v <= k_src.height - 0.5)
    return iv[:, None] & iu[None, :]


# ----------------------------------------------------------------------
# acquisition metadata
# ----------------------------------------------------------------------

# field -> (DICOM attribute, tag, human name)
META_ATTRIBUTES = {
    "primary_angle_deg": ("PositionerPrimaryAngle", (0x0018, 0x1510), "primary positioner angle"),
    "secondary_angle_deg": ("PositionerSecondaryAngle", (0x0018, 0x1511), "secondary positioner angle"),
    "source_to_patient_mm": ("DistanceSourceToPatient", (0x0018, 0x1111), "source-to-patient distance"),
    "source_to_detector_mm": ("DistanceSourceToDetector", (0x0018, 0x1110), "source-to-detector distance"),
    "pixel_spacing_mm": ("ImagerPixelSpacing", (0x0018, 0x1164), "imager pixel spacing"),
    "rows": ("Rows", (0x0028, 0x0010), "rows"),
    "cols": ("Columns", (0x0028, 0x0011), "columns"),
}
SIDECAR_KEYS = tuple(META_ATTRIBUTES) + ("principal_point_mm",)


@dataclass(frozen=True)
class AcquisitionMeta:
    """C-arm positioner and detector attributes; absent values are ``None``."""

    primary_angle_deg: float | None = None
    secondary_angle_deg: float | None = None
    source_to_patient_mm: float | None = None
    source_to_detector_mm: float | None = None
    pixel_spacing_mm: tuple | None = None
    rows: int | None = None
    cols: int | None = None
    principal_point_mm: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("source_to_patient_mm", "source_to_detector_mm"):
            val = getattr(self, name)
            if val is not None and not (math.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be a positive distance, got {val}")
        if self.pixel_spacing_mm is not None:
            object.__setattr__(self, "pixel_spacing_mm", tuple(float(s) for s in self.pixel_spacing_mm))
        object.__setattr__(self, "principal_point_mm", tuple(float(s) for s in self.principal_point_mm))

    def require(self, name: str):
        val = getattr(self, name)
        if val is None:
            attr, tag, human = META_ATTRIBUTES[name]
            raise ValueError(f"{human} absent ({attr}, tag ({tag[0]:04X},{tag[1]:04X}))")
        return val

    def intrinsics(self) -> Intrinsics:
        """Detector calibration implied by the metadata."""
        return Intrinsics(
            self.require("source_to_detector_mm"),
            self.require("rows"),
            self.require("cols"),
            self.require("pixel_spacing_mm"),
            self.principal_point_mm,
        )

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in SIDECAR_KEYS}
        for k in ("pixel_spacing_mm", "principal_point_mm"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


def pose_from_meta(m: AcquisitionMeta, sign_convention: str = "negative_y") -> EulerPose:
    """Partial pose from positioner angles and source-to-patient distance.

    Only alpha, beta and the depth y are known; gamma, x and z are zero and
    the result is flagged ``partial``.
    """
    if sign_convention not in SIGN_CONVENTIONS:
        raise ValueError(f"unknown sign convention {sign_convention!r}; expected one of {SIGN_CONVENTIONS}")
    alpha = float(m.require("primary_angle_deg"))
    beta = float(m.require("secondary_angle_deg"))
    spd = float(m.require("source_to_patient_mm"))
    y = -spd if sign_convention == "negative_y" else spd
    return EulerPose(alpha, beta, 0.0, 0.0, y, 0.0, partial=True)


def _sidecar_meta(d: dict) -> AcquisitionMeta:
    extra = set(d) - set(SIDECAR_KEYS)
    if extra:
        raise FormatError(f"unknown sidecar keys: {sorted(extra)}")
    kw = {}
    for k in ("primary_angle_deg", "secondary_angle_deg", "source_to_patient_mm", "source_to_detector_mm"):
        if d.get(k) is not None:
            kw[k] = float(d[k])
    for k in ("rows", "cols"):
        if d.get(k) is not None:
            kw[k] = int(d[k])
    for k in ("pixel_spacing_mm", "principal_point_mm"):
        if d.get(k) is not None:
            if len(d[k]) != 2:
                raise FormatError(f"{k} needs two values")
            kw[k] = tuple(float(v) for v in d[k])
    return AcquisitionMeta(**kw)


# ----------------------------------------------------------------------
# minimal DICOM
# ----------------------------------------------------------------------

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
_TAG_FIELD = {tag: name for name, (_, tag, _) in META_ATTRIBUTES.items()}


def _decode_value(vr: bytes, raw: bytes, tag):
    if vr in (b"DS", b"IS"):
        parts = [p.strip() for p in raw.rstrip(b"\x00 ").decode("ascii").split("\\")]
        return [float(p) for p in parts if p]
    if vr == b"US":
        return list(struct.unpack(f"<{len(raw) // 2}H", raw))
    if vr == b"FD":
        return list(struct.unpack(f"<{len(raw) // 8}d", raw))
    if vr == b"FL":
        return list(struct.unpack(f"<{len(raw) // 4}f", raw))
    raise FormatError(f"unexpected VR {vr.decode('ascii', 'replace')} for tag ({tag[0]:04X},{tag[1]:04X})")


def read_dicom_min(payload: bytes) -> AcquisitionMeta:
    """Read the positioner/detector tags from an explicit-VR little-endian stream."""
    if len(payload) < 132 or payload[128:132] != b"DICM":
        raise FormatError("missing DICM preamble at byte 128")
    pos = 132
    values = {}
    n = len(payload)
    while pos < n:
        if pos + 8 > n:
            raise FormatError(f"truncated element header at byte {pos}")
        group, elem = struct.unpack_from("<HH", payload, pos)
        vr = payload[pos + 4 : pos + 6]
        if not (len(vr) == 2 and vr.isalpha() and vr.isupper()):
            raise FormatError(f"implicit VR encoding is not supported (element ({group:04X},{elem:04X}))")
        if vr in _LONG_VRS:
            if pos + 12 > n:
                raise FormatError(f"truncated element header at byte {pos}")
            (length,) = struct.unpack_from("<I", payload, pos + 8)
            start = pos + 12
        else:
            (length,) = struct.unpack_from("<H", payload, pos + 6)
            start = pos + 8
        if length == 0xFFFFFFFF:
            if group >= 0x7FE0:
                break  # encapsulated pixel data; every header tag precedes it
            raise FormatError(f"undefined-length element ({group:04X},{elem:04X}) is not supported")
        end = start + length
        if end > n:
            raise FormatError(f"truncated value of element ({group:04X},{elem:04X})")
        raw = payload[start:end]
        if (group, elem) == (0x0002, 0x0010):
            ts = raw.rstrip(b"\x00 ").decode("ascii")
            if ts != EXPLICIT_VR_LE:
                raise FormatError(f"unsupported transfer syntax {ts}; only explicit VR little endian is read")
        elif (group, elem) in _TAG_FIELD:
            values[_TAG_FIELD[(group, elem)]] = _decode_value(vr, raw, (group, elem))
        pos = end
    kw = {}
    for name, val in values.items():
        if not val:
            continue
        if name == "pixel_spacing_mm":
            if len(val) != 2:
                raise FormatError("ImagerPixelSpacing needs two values")
            # DICOM stores (row spacing, column spacing) = (s_y, s_x)
            kw[name] = (val[1], val[0])
        elif name in ("rows", "cols"):
            kw[name] = int(val[0])
        else:
            kw[name] = float(val[0])
    return AcquisitionMeta(**kw)


def _element(tag, vr: bytes, value: bytes) -> bytes:
    if len(value) % 2:
        value += b"\x00" if vr == b"UI" else b" "
    if vr in _LONG_VRS:
        return struct.pack("<HH2sHI", tag[0], tag[1], vr, 0, len(value)) + value
    return struct.pack("<HH2sH", tag[0], tag[1], vr, len(value)) + value


def _ds_text(v: float) -> str:
    # DS strings hold at most 16 characters
    text = repr(float(v))
    return text if len(text) <= 16 else f"{v:.10g}"


def _ds(*vals) -> bytes:
    return "\\".join(_ds_text(v) for v in vals).encode("ascii")


def encode_dicom_min(m: AcquisitionMeta) -> bytes:
    """Minimal explicit-VR little-endian file carrying only the metadata tags."""
    ts = _element((0x0002, 0x0010), b"UI", EXPLICIT_VR_LE.encode("ascii"))
    meta = _element((0x0002, 0x0000), b"UL", struct.pack("<I", len(ts))) + ts
    body = b""
    for name, (_, tag, _) in sorted(META_ATTRIBUTES.items(), key=lambda kv: kv[1][1]):
        val = getattr(m, name)
        if val is None:
            continue
        if name == "pixel_spacing_mm":
            body += _element(tag, b"DS", _ds(val[1], val[0]))
        elif name in ("rows", "cols"):
            body += _element(tag, b"US", struct.pack("<H", val))
        else:
            body += _element(tag, b"DS", _ds(val))
    return b"\x00" * 128 + b"DICM" + meta + body


def write_dicom_min(path, m: AcquisitionMeta) -> None:
    atomic_write_bytes(path, encode_dicom_min(m))


def parse_meta(path, format: str = "json_sidecar") -> AcquisitionMeta:
    if format == "json_sidecar":
        try:
            d = read_json(path)
        except ValueError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise FormatError(f"{path}: sidecar must be a JSON object")
        return _sidecar_meta(d)
    if format == "dicom_min":
        with open(path, "rb") as fh:
            return read_dicom_min(fh.read())
    raise ValueError(f"unknown metadata format {format!r}; expected json_sidecar or dicom_min")
