"""Command-line interface.

Exit codes: 0 success, 1 IO or file-format failure, 2 usage error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .acquisition import SIGN_CONVENTIONS, canonicalize, parse_meta, pose_from_meta
from .geometry import EulerPose, Frame, Intrinsics, Pose, pose_from_json, pose_to_euler, pose_to_json
from .metrics import full_report
from .phantoms import PHANTOM_KINDS, make_phantom
from .registration import PRESETS, InitStrategy, RefineConfig, RegistrationError, register
from .renderer import Image, make_rays, render, render_structure, set_threads
from .similarity import LANDSCAPE_AXES, METRICS, SimilarityConfig, landscape, landscape_csv, sobel
from .volume import DEFAULT_MU_WATER, hu_to_attenuation

log = logging.getLogger("drrreg")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# flag -> builder keyword, per phantom kind
PHANTOM_PARAMS = {
    "uniform_cube": {"edge_mm": "edge_mm", "mu": "mu", "voxel_mm": "voxel_mm"},
    "sphere": {"radius_mm": "radius_mm", "mu": "mu", "voxel_mm": "voxel_mm", "margin_mm": "margin_mm"},
    "nested_spheres": {
        "radius_mm": "outer_radius_mm", "inner_radius_mm": "inner_radius_mm", "mu": "mu_outer",
        "mu_inner": "mu_inner", "voxel_mm": "voxel_mm", "margin_mm": "margin_mm",
    },
    "two_boxes": {"box_mm": "box_mm", "gap_mm": "gap_mm", "mu": "mu", "voxel_mm": "voxel_mm"},
    "sphere_in_box": {
        "radius_mm": "sphere_radius_mm", "mu": "mu_sphere", "mu_box": "mu_box",
        "voxel_mm": "voxel_mm", "margin_mm": "margin_mm",
    },
    "smooth": {"extent_mm": "extent_mm", "voxel_mm": "voxel_mm"},
}


# ----------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_intrinsics(path) -> Intrinsics:
    return Intrinsics.from_dict(fio.read_json(path))


def _frame(args, v=None) -> Frame:
    if args.frame == "world":
        return Frame.identity()
    iso = v.isocenter() if v is not None else np.asarray(args.isocenter, dtype=np.float64)
    return Frame.carm(iso)


def _load_volume(args):
    """Load ``--volume``; HU volumes are converted to attenuation unless ``--units hu-raw``."""
    units = "hu" if args.units in ("hu", "hu-raw") else args.units
    v = fio.load_volume(args.volume, units=units or "attenuation")
    if args.units is not None and v.units != units:
        v = v.with_data(v.data, units=units)
    if v.units == "hu" and args.units != "hu-raw":
        v = hu_to_attenuation(v, args.mu_water)
    return v


def _load_pose(path):
    pose = pose_from_json(fio.read_json(path))
    if isinstance(pose, EulerPose) and pose.partial:
        log.warning("%s holds a partial pose (only some parameters are known)", path)
    return pose


def _world(pose, frame: Frame) -> Pose:
    return frame.to_world(pose)


def _load_target(path, k: Intrinsics) -> Image:
    pixels, _ = fio.load_image(path)
    if pixels.shape != (k.height, k.width):
        raise UsageError(f"image {pixels.shape} does not match intrinsics {(k.height, k.width)}")
    return Image(pixels, k)


def _image_meta(k: Intrinsics, world: Pose | None) -> dict:
    meta = {"intrinsics": k.to_dict()}
    if world is not None:
        meta["pose"] = pose_to_json(world)
    return meta


def _parse_keep(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--keep expects comma-separated integers, got {text!r}") from None


def _parse_vec3(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(float(p) for p in parts)


def overlay(target: np.ndarray, render_px: np.ndarray) -> np.ndarray:
    """Edges of ``render_px`` (Sobel magnitude above its 90th percentile)
    blended at 50% over the min-max normalized target."""
    t = np.asarray(target, dtype=np.float64)
    span = np.ptp(t)
    base = (t - t.min()) / span if span > 0 else np.zeros_like(t)
    gx, gy = sobel(render_px)
    mag = np.hypot(gx, gy)
    edges = (mag > np.percentile(mag, 90)).astype(np.float64) if np.ptp(mag) > 0 else np.zeros_like(mag)
    return 0.5 * base + 0.5 * edges


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_phantom(args) -> int:
    allowed = PHANTOM_PARAMS[args.kind]
    params = {}
    for flag in {f for m in PHANTOM_PARAMS.values() for f in m}:
        val = getattr(args, flag)
        if val is None:
            continue
        if flag not in allowed:
            raise UsageError(f"--{flag.replace('_', '-')} does not apply to phantom kind {args.kind}")
        params[allowed[flag]] = val
    v, fid, labels = make_phantom(args.kind, **params)
    fio.save_volume(args.out, v)
    if args.fiducials:
        fio.save_fiducials(args.fiducials, fid)
    if args.labels:
        if labels is None:
            raise UsageError(f"phantom kind {args.kind} has no label map")
        fio.save_labels(args.labels, labels, v.spacing, v.origin)
    log.info("wrote %s phantom %s to %s", args.kind, v.shape, args.out)
    return EXIT_OK


def cmd_render(args) -> int:
    k = _load_intrinsics(args.intrinsics)
    v = _load_volume(args)
    world = _world(_load_pose(args.pose), _frame(args, v))
    rays = make_rays(k, world)
    if args.labels:
        if not args.keep:
            raise UsageError("--labels requires --keep")
        img = render_structure(v, fio.load_labels(args.labels), args.keep, rays, args.method, args.samples)
    else:
        img = render(v, rays, args.method, args.samples)
    fio.save_image(args.out, img.pixels, args.format, _image_meta(k, world))
    return EXIT_OK


def _refine_config(args) -> RefineConfig:
    if not args.config:
        return RefineConfig()
    return RefineConfig.from_json(fio.read_json(args.config))


def cmd_register(args) -> int:
    k = _load_intrinsics(args.intrinsics)
    v = _load_volume(args)
    target = _load_target(args.target, k)
    frame = _frame(args, v)
    cfg = _refine_config(args)
    if args.init_pose:
        init = _load_pose(args.init_pose)
        if isinstance(init, Pose):
            init = pose_to_euler(init)
        strategy = InitStrategy.fixed(init)
    elif args.fixed_preset:
        mid = [0.5 * (lo + hi) for lo, hi in PRESETS[args.fixed_preset].values()]
        strategy = InitStrategy.fixed(EulerPose.from_params(mid))
    else:
        strategy = InitStrategy.preset(args.multistart_preset, args.n_starts, args.seed)
    out = Path(args.out_dir)
    if not out.is_dir():
        raise OSError(f"output directory {out} does not exist")
    try:
        res = register(target, v, k, strategy, cfg, args.top_r, frame)
    except RegistrationError as exc:
        fio.atomic_write_text(out / "trace.csv", exc.trace.to_csv())
        raise
    pose = pose_to_euler(res.pose)
    fio.write_json(out / "pose.json", pose_to_json(pose))
    fio.write_json(out / "pose_world.json", pose_to_json(res.world_pose))
    fio.atomic_write_text(out / "trace.csv", res.trace.to_csv())
    final = render(v, make_rays(k, res.world_pose), "trilinear", cfg.samples_at(len(cfg.scales) - 1, v))
    fio.save_image(out / "overlay.pgm", overlay(target.pixels, final.pixels), "pgm")
    summary = {
        "metric": res.metric,
        "termination": res.trace.termination,
        "iterations": len(res.trace.records),
        "events": res.trace.events,
    }
    if args.gt_pose:
        gt_world = _world(_load_pose(args.gt_pose), frame)
        fid = fio.load_fiducials(args.fiducials) if args.fiducials else None
        summary["report"] = full_report(gt_world, res.world_pose, k, fid).to_json()
    fio.write_json(out / "summary.json", summary)
    log.info("registered: metric %.6f (%s)", res.metric, res.trace.termination)
    return EXIT_OK


def cmd_metrics(args) -> int:
    k = _load_intrinsics(args.intrinsics)
    frame = _frame(args)
    gt = _world(_load_pose(args.gt_pose), frame)
    est = _world(_load_pose(args.est_pose), frame)
    fid = None
    if args.fiducials:
        fid = fio.load_fiducials(args.fiducials)
    else:
        log.warning("no fiducials given; reporting pose distances only (rot/arc/xyz/dGeo)")
    sys.stdout.write(_dump(full_report(gt, est, k, fid).to_json()))
    return EXIT_OK


def cmd_landscape(args) -> int:
    k = _load_intrinsics(args.intrinsics)
    v = _load_volume(args)
    target = _load_target(args.target, k)
    frame = _frame(args, v)
    center = _load_pose(args.gt_pose)
    if isinstance(center, Pose):
        center = pose_to_euler(center)
    rows = landscape(
        target, v, k, center, args.axes, args.rot_range, args.trans_range, args.steps,
        SimilarityConfig(args.metric, args.pyramid_levels), frame, args.samples,
    )
    fio.atomic_write_text(args.out, landscape_csv(rows))
    return EXIT_OK


def cmd_resample(args) -> int:
    k_src = _load_intrinsics(args.src_intrinsics)
    k_dst = _load_intrinsics(args.canon_intrinsics)
    pixels, meta = fio.load_image(args.image)
    if pixels.shape != (k_src.height, k_src.width):
        raise UsageError(f"image {pixels.shape} does not match source intrinsics")
    out = canonicalize(Image(pixels, k_src), k_dst)
    fmt = args.format or ("pgm" if str(args.image).endswith(".pgm") else "rawf32")
    extra = {key: val for key, val in meta.items() if key == "pose"}
    fio.save_image(args.out, out.pixels, fmt, {"intrinsics": k_dst.to_dict(), **extra})
    return EXIT_OK


def cmd_parse_meta(args) -> int:
    m = parse_meta(args.input, args.format)
    doc = {"meta": m.to_json()}
    if args.pose:
        doc["pose"] = pose_to_json(pose_from_meta(m, args.sign_convention))
    sys.stdout.write(_dump(doc))
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------


def _positive_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return n


def _add_units(p):
    p.add_argument("--units", choices=("attenuation", "hu", "hu-raw"),
                   help="volume values: attenuation in 1/mm, HU converted to attenuation, or HU rendered as is "
                        "(default: the rawjson header, else attenuation)")
    p.add_argument("--mu-water", type=float, default=DEFAULT_MU_WATER,
                   help=f"water attenuation in 1/mm for HU conversion (default {DEFAULT_MU_WATER})")


def _add_frame(p, with_isocenter=False):
    p.add_argument("--frame", choices=("carm", "world"), default="carm",
                   help="pose frame: C-arm frame about the isocenter (default) or raw world poses")
    if with_isocenter:
        p.add_argument("--isocenter", type=_parse_vec3, default=(0.0, 0.0, 0.0), metavar="X,Y,Z",
                       help="isocenter in world mm for --frame carm (default 0,0,0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drrreg", description="X-ray rendering and 2D/3D rigid registration")
    parser.add_argument("--threads", type=_positive_int, default=None, help="renderer worker threads")
    parser.add_argument("--seed", type=int, default=0, help="random seed for multistart sampling")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="stderr log level")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("phantom", help="write an analytic phantom volume")
    p.add_argument("--kind", required=True, choices=PHANTOM_KINDS, help="phantom type")
    p.add_argument("--out", required=True, help="volume path (.json rawjson or .nii)")
    p.add_argument("--fiducials", help="fiducial JSON output path")
    p.add_argument("--labels", help="label map output path (rawjson), for labelled phantoms")
    for flag, text in [
        ("edge-mm", "cube edge length"), ("mu", "main attenuation (1/mm)"), ("mu-inner", "inner sphere attenuation"),
        ("mu-box", "box attenuation"), ("voxel-mm", "voxel size"), ("radius-mm", "sphere radius"),
        ("inner-radius-mm", "inner sphere radius"), ("margin-mm", "air margin"), ("gap-mm", "gap between boxes"),
        ("box-mm", "box edge length"), ("extent-mm", "grid extent"),
    ]:
        p.add_argument(f"--{flag}", type=float, help=text)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("render", help="render a synthetic radiograph")
    p.add_argument("--volume", required=True, help="volume path")
    p.add_argument("--pose", required=True, help="pose JSON")
    p.add_argument("--intrinsics", required=True, help="intrinsics JSON")
    p.add_argument("--method", choices=("siddon", "trilinear"), default="trilinear", help="ray integrator")
    p.add_argument("--samples", type=_positive_int, help="trilinear samples per ray (default 2*max(N))")
    p.add_argument("--labels", help="label map; render only --keep structures")
    p.add_argument("--keep", type=_parse_keep, help="comma-separated label ids to keep")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--format", choices=("rawf32", "pgm"), default="rawf32", help="image format")
    _add_units(p)
    _add_frame(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("register", help="recover the pose of a radiograph")
    p.add_argument("--target", required=True, help="target image (rawf32 header .json or .pgm)")
    p.add_argument("--volume", required=True, help="volume path")
    p.add_argument("--intrinsics", required=True, help="canonical intrinsics JSON")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--init-pose", help="initial pose JSON")
    g.add_argument("--fixed-preset", choices=sorted(PRESETS), help="start from the centre of a preset range")
    g.add_argument("--multistart-preset", choices=sorted(PRESETS), help="sample starts from a preset range")
    p.add_argument("--n-starts", type=_positive_int, default=64, help="multistart sample count")
    p.add_argument("--top-r", type=_positive_int, default=1, help="candidates to refine")
    p.add_argument("--config", help="RefineConfig JSON")
    p.add_argument("--gt-pose", help="ground-truth pose JSON for an error report")
    p.add_argument("--fiducials", help="fiducial JSON for the error report")
    p.add_argument("--out-dir", required=True, help="existing output directory")
    _add_units(p)
    _add_frame(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("metrics", help="pose error report (JSON on stdout)")
    p.add_argument("--gt-pose", required=True, help="ground-truth pose JSON")
    p.add_argument("--est-pose", required=True, help="estimated pose JSON")
    p.add_argument("--intrinsics", required=True, help="intrinsics JSON")
    p.add_argument("--fiducials", help="fiducial JSON (omit for pose distances only)")
    _add_frame(p, with_isocenter=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("landscape", help="1-D metric sweeps around a pose (CSV)")
    p.add_argument("--target", required=True, help="target image")
    p.add_argument("--volume", required=True, help="volume path")
    p.add_argument("--intrinsics", required=True, help="intrinsics JSON")
    p.add_argument("--gt-pose", required=True, help="centre pose JSON")
    p.add_argument("--axes", nargs="+", choices=LANDSCAPE_AXES, default=list(LANDSCAPE_AXES), help="axes to sweep")
    p.add_argument("--rot-range", type=float, default=60.0, help="rotation half-range in degrees")
    p.add_argument("--trans-range", type=float, default=100.0, help="translation half-range in mm")
    p.add_argument("--steps", type=_positive_int, default=121, help="samples per axis")
    p.add_argument("--metric", choices=METRICS, default="mncc_gncc_mean", help="similarity")
    p.add_argument("--pyramid-levels", type=_positive_int, default=4, help="mNCC pyramid depth")
    p.add_argument("--samples", type=_positive_int, help="trilinear samples per ray")
    p.add_argument("--out", required=True, help="CSV output path")
    _add_units(p)
    _add_frame(p)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("resample", help="resample an image onto canonical intrinsics")
    p.add_argument("--image", required=True, help="input image")
    p.add_argument("--src-intrinsics", required=True, help="intrinsics of the input image")
    p.add_argument("--canon-intrinsics", required=True, help="canonical intrinsics")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--format", choices=("rawf32", "pgm"), help="output format (default: same as input)")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("parse-meta", help="read acquisition metadata (JSON on stdout)")
    p.add_argument("--input", required=True, help="sidecar JSON or minimal DICOM file")
    p.add_argument("--format", choices=("json_sidecar", "dicom_min"), default="json_sidecar", help="input format")
    p.add_argument("--pose", action="store_true", help="also emit the partial pose")
    p.add_argument("--sign-convention", choices=SIGN_CONVENTIONS, default="negative_y", help="depth sign")
    p.set_defaults(func=cmd_parse_meta)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (RegistrationError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, fio.FormatError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
