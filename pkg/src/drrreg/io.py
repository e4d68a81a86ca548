"""File formats: rawjson and NIfTI-1 volumes, fiducials, PGM / raw float images."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .volume import FiducialSet, LabelMap, Volume


class FormatError(ValueError):
    """A file does not follow the expected layout."""


RAW_DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2")}
NIFTI_DTYPES = {4: np.dtype("int16"), 16: np.dtype("float32")}
RAWJSON_KEYS = {"shape", "spacing", "origin", "dtype", "order", "data", "units", "labels"}


# ----------------------------------------------------------------------
# atomic writes
# ----------------------------------------------------------------------


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ----------------------------------------------------------------------
# rawjson volumes
# ----------------------------------------------------------------------


def _raw_dtype_name(arr: np.ndarray) -> str:
    if arr.dtype.kind in "iu":
        if arr.size and (arr.min() < -32768 or arr.max() > 32767):
            raise ValueError("integer data does not fit in int16")
        return "i16"
    return "f32"


def save_rawjson(path, data: np.ndarray, spacing, origin, units=None, labels=None) -> None:
    """Write ``<name>.json`` plus ``<name>.bin`` (x fastest, little-endian)."""
    path = Path(path)
    dtype = _raw_dtype_name(data)
    bin_path = path.with_suffix(".bin")
    with np.errstate(over="ignore"):
        cast = np.asarray(data).astype(RAW_DTYPES[dtype])
    if dtype == "f32" and not np.isfinite(cast).all():
        raise ValueError(f"{path}: values are not representable as float32")
    payload = cast.tobytes(order="F")
    header = {
        "shape": list(map(int, data.shape)),
        "spacing": list(map(float, spacing)),
        "origin": list(map(float, origin)),
        "dtype": dtype,
        "order": "xyz-fastest-first",
        "data": bin_path.name,
    }
    if units:
        header["units"] = units
    if labels:
        header["labels"] = {str(k): v for k, v in sorted(labels.items())}
    atomic_write_bytes(bin_path, payload)
    write_json(path, header)


def read_rawjson(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        header = read_json(path)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    unknown = set(header) - RAWJSON_KEYS
    if unknown:
        raise FormatError(f"{path}: unknown header keys {sorted(unknown)}")
    for key in ("shape", "spacing", "origin", "dtype", "order", "data"):
        if key not in header:
            raise FormatError(f"{path}: missing header field {key!r}")
    if header["order"] != "xyz-fastest-first":
        raise FormatError(f"{path}: unsupported order {header['order']!r}")
    if header["dtype"] not in RAW_DTYPES:
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) != 3 or min(shape) < 1:
        raise FormatError(f"{path}: shape must be three positive integers, got {header['shape']}")
    if len(header["spacing"]) != 3 or len(header["origin"]) != 3:
        raise FormatError(f"{path}: spacing and origin need three values")
    dt = RAW_DTYPES[header["dtype"]]
    payload = (path.parent / header["data"]).read_bytes()
    expected = int(np.prod(shape)) * dt.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload length {len(payload)} does not match shape {shape} "
            f"x {dt.itemsize} bytes = {expected}"
        )
    data = np.frombuffer(payload, dtype=dt).reshape(shape, order="F")
    return data.astype(dt.newbyteorder("="), copy=True), header


# ----------------------------------------------------------------------
# NIfTI-1
# ----------------------------------------------------------------------


def _nifti_endian(buf: bytes) -> str:
    if struct.unpack("<i", buf[:4])[0] == 348:
        return "<"
    if struct.unpack(">i", buf[:4])[0] == 348:
        return ">"
    raise FormatError("NIfTI sizeof_hdr is not 348")


def _quaternion_matrix(b, c, d) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )


def read_nifti1(path) -> tuple[np.ndarray, tuple, tuple]:
    """Read a single-file NIfTI-1 volume.

    Returns ``(data, spacing, origin)``. Only affines of the form
    diagonal-scale-plus-origin are accepted.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 348:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    e = _nifti_endian(buf)
    magic = buf[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: bad magic {magic!r}, expected b'n+1\\x00'")
    dim = struct.unpack(e + "8h", buf[40:56])
    if dim[0] not in (3, 4) or (dim[0] == 4 and dim[4] != 1):
        raise FormatError(f"{path}: dim[0]={dim[0]} unsupported, need a single 3D volume")
    shape = tuple(int(n) for n in dim[1:4])
    if min(shape) < 1:
        raise FormatError(f"{path}: dim has non-positive extent {shape}")
    datatype = struct.unpack(e + "h", buf[70:72])[0]
    if datatype not in NIFTI_DTYPES:
        raise FormatError(f"{path}: unsupported datatype {datatype} (need 4=int16 or 16=float32)")
    pixdim = struct.unpack(e + "8f", buf[76:108])
    vox_offset = int(struct.unpack(e + "f", buf[108:112])[0])
    slope, inter = struct.unpack(e + "2f", buf[112:120])
    qform_code, sform_code = struct.unpack(e + "2h", buf[252:256])
    quat = struct.unpack(e + "3f", buf[256:268])
    qoffset = struct.unpack(e + "3f", buf[268:280])
    srow = np.array(struct.unpack(e + "12f", buf[280:328]), dtype=np.float64).reshape(3, 4)

    if sform_code > 0:
        lin = srow[:, :3]
        if np.any(lin[~np.eye(3, dtype=bool)] != 0):
            raise FormatError(f"{path}: srow affine is not diagonal; rotated volumes are unsupported")
        spacing = tuple(float(v) for v in np.diag(lin))
        origin = tuple(float(v) for v in srow[:, 3])
    elif qform_code > 0:
        R = _quaternion_matrix(*quat)
        if np.any(np.abs(R[~np.eye(3, dtype=bool)]) > 1e-6):
            raise FormatError(f"{path}: quaternion orientation is not axis-aligned; unsupported")
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        diag = np.round(np.diag(R))
        spacing = (diag[0] * pixdim[1], diag[1] * pixdim[2], diag[2] * pixdim[3] * qfac)
        spacing = tuple(float(v) for v in spacing)
        origin = tuple(float(v) for v in qoffset)
    else:
        spacing = tuple(float(v) for v in pixdim[1:4])
        origin = (0.0, 0.0, 0.0)
    if any(s == 0 for s in spacing):
        raise FormatError(f"{path}: pixdim has zero spacing {spacing}")

    dt = NIFTI_DTYPES[datatype].newbyteorder(e)
    n = int(np.prod(shape))
    end = vox_offset + n * dt.itemsize
    if vox_offset < 348 or len(buf) < end:
        raise FormatError(f"{path}: truncated payload, need {end} bytes, have {len(buf)}")
    data = np.frombuffer(buf, dtype=dt, count=n, offset=vox_offset).reshape(shape, order="F")
    data = data.astype(dt.newbyteorder("="))
    if slope == 0:
        slope = 1.0
    if slope != 1.0 or inter != 0.0:
        data = data.astype(np.float64) * float(slope) + float(inter)
    return data, spacing, origin


def write_nifti1(path, data: np.ndarray, spacing, origin) -> None:
    """Write a single-file little-endian NIfTI-1 with an sform affine."""
    data = np.asarray(data)
    if data.dtype.kind in "iu":
        datatype, dt = 4, np.dtype("<i2")
        if data.size and (data.min() < -32768 or data.max() > 32767):
            raise ValueError("integer data does not fit in int16")
    else:
        datatype, dt = 16, np.dtype("<f4")
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *(abs(s) for s in spacing), 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<2h", hdr, 252, 0, 1)
    srow = np.zeros((3, 4))
    srow[:, :3] = np.diag(spacing)
    srow[:, 3] = origin
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = b"n+1\x00"
    atomic_write_bytes(path, bytes(hdr) + data.astype(dt).tobytes(order="F"))


# ----------------------------------------------------------------------
# volume front door
# ----------------------------------------------------------------------


def guess_volume_format(path) -> str:
    return "nifti1" if str(path).endswith(".nii") else "rawjson"


def load_volume(path, format: str | None = None, units: str = "attenuation") -> Volume:
    """Load a volume from ``nifti1`` (.nii) or ``rawjson`` (.json + .bin)."""
    format = format or guess_volume_format(path)
    if format == "nifti1":
        data, spacing, origin = read_nifti1(path)
    elif format == "rawjson":
        data, header = read_rawjson(path)
        spacing, origin = header["spacing"], header["origin"]
        units = header.get("units", units)
    else:
        raise ValueError(f"unknown volume format {format!r}")
    return Volume(data, spacing, origin, units)


def save_volume(path, v: Volume, format: str | None = None) -> None:
    format = format or guess_volume_format(path)
    if format == "nifti1":
        write_nifti1(path, v.data, v.spacing, v.origin)
    elif format == "rawjson":
        save_rawjson(path, v.data, v.spacing, v.origin, units=v.units)
    else:
        raise ValueError(f"unknown volume format {format!r}")


def load_labels(path, format: str | None = None) -> LabelMap:
    format = format or guess_volume_format(path)
    names = {}
    if format == "rawjson":
        data, header = read_rawjson(path)
        names = {int(k): v for k, v in header.get("labels", {}).items()}
    else:
        data, _, _ = read_nifti1(path)
    if data.dtype.kind not in "iu":
        if not np.all(data == np.round(data)):
            raise FormatError(f"{path}: label map holds non-integer values")
        data = data.astype(np.int64)
    return LabelMap(data, names)


def save_labels(path, labels: LabelMap, spacing, origin) -> None:
    save_rawjson(path, labels.labels.astype(np.int16), spacing, origin, labels=labels.names)


def load_fiducials(path) -> FiducialSet:
    return FiducialSet.from_json(read_json(path))


def save_fiducials(path, fiducials: FiducialSet) -> None:
    write_json(path, fiducials.to_json())


# ----------------------------------------------------------------------
# 2D images
# ----------------------------------------------------------------------


def encode_pgm(pixels: np.ndarray) -> tuple[bytes, tuple[float, float]]:
    """16-bit binary PGM with a per-image min-max window."""
    img = np.asarray(pixels, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.round((img - lo) * scale).astype(">u2")
    h, w = img.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes(), (lo, hi)


def decode_pgm(payload: bytes, window=None) -> np.ndarray:
    parts = []
    pos = 0
    while len(parts) < 4:
        while payload[pos : pos + 1].isspace():
            pos += 1
        if payload[pos : pos + 1] == b"#":
            pos = payload.index(b"\n", pos) + 1
            continue
        start = pos
        while not payload[pos : pos + 1].isspace():
            pos += 1
        parts.append(payload[start:pos])
    pos += 1
    if parts[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {parts[0]!r})")
    w, h, maxval = (int(p) for p in parts[1:])
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dt.itemsize
    if len(payload) - pos < need:
        raise FormatError("truncated PGM payload")
    q = np.frombuffer(payload, dtype=dt, count=w * h, offset=pos).reshape(h, w).astype(np.float64)
    if window is None:
        return q / maxval
    lo, hi = window
    return lo + q / maxval * (hi - lo)


def save_image(path, pixels: np.ndarray, format: str = "rawf32", meta: dict | None = None) -> None:
    """Write an image as ``pgm`` (+ window sidecar) or ``rawf32`` (+ header).

    For ``rawf32`` the path names the JSON header and the payload goes to a
    sibling ``.bin``; ``meta`` entries (e.g. intrinsics) are stored in the
    header / sidecar.
    """
    path = Path(path)
    img = np.asarray(pixels, dtype=np.float64)
    if format == "pgm":
        payload, window = encode_pgm(img)
        atomic_write_bytes(path, payload)
        write_json(path.with_suffix(".json"), {"window": list(window), **(meta or {})})
    elif format == "rawf32":
        bin_path = path.with_suffix(".bin")
        atomic_write_bytes(bin_path, img.astype("<f4").tobytes(order="C"))
        header = {
            "shape": [int(img.shape[0]), int(img.shape[1])],
            "dtype": "f32",
            "order": "row-major",
            "data": bin_path.name,
            **(meta or {}),
        }
        write_json(path if path.suffix == ".json" else path.with_suffix(".json"), header)
    else:
        raise ValueError(f"unknown image format {format!r}")


def load_image(path) -> tuple[np.ndarray, dict]:
    """Load an image written by :func:`save_image`; returns ``(pixels, meta)``."""
    path = Path(path)
    if path.suffix == ".pgm":
        side = path.with_suffix(".json")
        meta = read_json(side) if side.exists() else {}
        return decode_pgm(path.read_bytes(), meta.get("window")), meta
    header = read_json(path.with_suffix(".json"))
    h, w = header["shape"]
    payload = (path.parent / header["data"]).read_bytes()
    if len(payload) != h * w * 4:
        raise FormatError(f"{path}: payload length {len(payload)} does not match {h}x{w} f32")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64), header
