"""Command-line front end: ``python3 -m sparsegs <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import io
from .core import TrainConfig
from .errors import SparseGSError, ValueRange
from .geometry import patch_border_mask, pseudo_cameras, warp
from .losses import normal_loss_grad, pearson_depth_loss_grad, photometric_loss_grad, scale_loss_grad
from .metrics import eval_report, report_json, report_table
from .optim import (
    TrainState,
    gradcheck,
    init_from_points,
    make_pseudo_views,
    make_view,
    normal_objective,
    pearson_objective,
    photometric_objective,
    save_checkpoint,
    scale_objective,
    scene_extent,
    train,
    zero_objective,
)
from .raster import render


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path, obj) -> None:
    with io.atomic_write(path) as fh:
        fh.write((json.dumps(obj, indent=2) + "\n").encode("utf-8"))


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _check_fraction(value: float, what: str) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueRange(f"{what} must lie in [0, 1], got {value}")


# -- subcommands ---------------------------------------------------------------------


def cmd_init(args) -> int:
    _check_fraction(args.conf_threshold, "--conf-threshold")
    pts = io.read_ply_points(args.points)
    cams = io.read_cameras(args.cameras) if args.cameras else None
    cloud = init_from_points(pts.points, pts.colors, cams, pts.confidence, args.conf_threshold, args.sh_degree)
    io.write_gaussian_ply(args.out, cloud)
    print(f"initialized {len(cloud)} gaussians from {len(pts.points)} points")
    return 0


def cmd_render(args) -> int:
    cloud = io.read_gaussian_ply(args.cloud)
    cam = io.read_camera_ref(args.camera)
    out = render(cloud, cam, args.background, early_stop=not args.no_early_stop, threads=args.threads)
    written = False
    if args.out_color:
        io.write_ppm(args.out_color, out.color)
        written = True
    if args.out_depth:
        io.write_pfm(args.out_depth, out.depth_plane if args.depth == "plane" else out.depth_accum)
        written = True
    if args.out_normal:
        io.write_pfm(args.out_normal, out.normals)
        written = True
    if args.out_alpha:
        io.write_pfm(args.out_alpha, out.alpha)
        written = True
    if not written:
        _log("render: no --out-* given, nothing written")
    return 0


def cmd_warp(args) -> int:
    img = io.read_ppm(args.image)
    depth = io.read_pfm(args.depth)
    conf = io.read_pfm(args.confidence) if args.confidence else np.ones(depth.shape)
    src = io.read_camera_ref(args.src_camera)
    dst = io.read_camera_ref(args.dst_camera)
    out, mask = warp(img, depth, conf, src, dst, args.conf_threshold)
    io.write_ppm(args.out, out)
    if args.out_mask:
        io.write_pfm(args.out_mask, mask.astype(np.float32))
    print(f"warped {int(mask.sum())} of {mask.size} pixels")
    return 0


def cmd_pseudo_cams(args) -> int:
    cams = io.read_cameras(args.cameras)
    out = pseudo_cameras(cams, args.views_per_pair, deduplicate=args.deduplicate)
    io.write_cameras(args.out, out)
    print(f"{len(out)} pseudo cameras")
    return 0


def cmd_mask(args) -> int:
    mask = patch_border_mask(args.width, args.height, args.patch)
    if args.out:
        io.write_pfm(args.out, mask.astype(np.float32))
    print(f"{int((~mask).sum())} masked pixels")
    return 0


def cmd_loss(args) -> int:
    kind = args.kind
    if kind == "photometric":
        t = photometric_loss_grad(io.read_ppm(args.pred), io.read_ppm(args.target), args.lambda_dssim)
    elif kind == "pearson":
        pred = io.read_pfm(args.pred)
        conf = io.read_pfm(args.confidence) if args.confidence else np.ones(pred.shape)
        t = pearson_depth_loss_grad(pred, io.read_pfm(args.target), conf)
    elif kind == "normal":
        pred = io.read_pfm(args.pred)
        mask = io.read_pfm(args.mask) > 0.5 if args.mask else np.ones(pred.shape[:2], dtype=bool)
        t = normal_loss_grad(pred, io.read_pfm(args.target), mask)
    else:
        t = scale_loss_grad(io.read_gaussian_ply(args.pred))
    print(json.dumps({"loss": kind, "value": t.value, "degenerate": t.degenerate}))
    return 0


def cmd_gradcheck(args) -> int:
    cloud = io.read_gaussian_ply(args.cloud)
    cam = io.read_camera_ref(args.camera)
    rng = np.random.default_rng(args.seed)
    H, W = cam.height, cam.width
    objectives = {}
    for kind in args.loss:
        if kind == "photometric":
            gt = io.read_ppm(args.target_image) if args.target_image else rng.uniform(0, 1, (H, W, 3))
            objectives[kind] = photometric_objective(gt)
        elif kind == "pearson":
            d = io.read_pfm(args.target_depth) if args.target_depth else rng.uniform(3, 7, (H, W))
            objectives[kind] = pearson_objective(d, np.ones((H, W)), args.depth)
        elif kind == "normal":
            n = rng.normal(size=(H, W, 3))
            objectives[kind] = normal_objective(n / np.linalg.norm(n, axis=2, keepdims=True), np.ones((H, W), bool))
        elif kind == "scale":
            objectives[kind] = scale_objective()
        else:
            objectives[kind] = zero_objective()
    report = gradcheck(cloud, cam, objectives, h=args.h, tol=args.tol)
    for name, groups in report.max_rel_error.items():
        for group, err in groups.items():
            flag = "FLAG" if err > args.tol else "ok"
            print(f"{name:12s} {group:11s} {err:.3e} {flag}")
    print("PASS" if report.passed else "FAIL")
    if args.out:
        _write_json(args.out, {"tol": args.tol, "max_rel_error": report.max_rel_error, "passed": report.passed})
    return 0 if report.passed or not args.strict else 3


def _resolve(base: str, path):
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(base, path)


def load_views(manifest: str, patch: int = 14):
    """Training views from a JSON list of ``{camera, image, depth?, confidence?}``."""
    base = os.path.dirname(os.path.abspath(manifest))
    with open(manifest, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    views = []
    for i, e in enumerate(entries):
        cam = io.read_camera_ref(_resolve(base, e["camera"]))
        img = io.read_ppm(_resolve(base, e["image"]))
        depth = io.read_pfm(_resolve(base, e["depth"])) if e.get("depth") else None
        conf = io.read_pfm(_resolve(base, e["confidence"])) if e.get("confidence") else None
        views.append(make_view(cam, img, depth, conf, patch, name=e.get("name", f"view_{i:03d}")))
    return views


def _config_value(field: dataclasses.Field, text: str):
    default = field.default
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueRange(f"--{field.name.replace('_', '-')} expects a boolean, got {text!r}")
    if isinstance(default, tuple):
        return _floats(text)
    return type(default)(text)


def build_config(args) -> TrainConfig:
    data = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueRange("train config must be a JSON object")
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            overrides[f.name] = _config_value(f, raw)
    overrides["seed"] = args.seed
    overrides["threads"] = args.threads
    return TrainConfig.from_dict(data, **overrides)


def cmd_train(args) -> int:
    cfg = build_config(args)
    cloud = io.read_gaussian_ply(args.cloud)
    views = load_views(args.views, cfg.patch_size)
    pseudo = make_pseudo_views(views, args.views_per_pair, cfg.conf_threshold) if cfg.w_pseudo > 0 else []
    extent = scene_extent([v.camera for v in views], cloud.means)
    state = TrainState(cloud, seed=cfg.seed, extent=extent)

    def progress(st, rec):
        if args.log_every and st.iteration % args.log_every == 0:
            _log(f"iter {st.iteration:6d}  loss {rec['total']:.6f}  gaussians {rec['n_gaussians']}")

    state = train(state, views, pseudo, cfg, progress)
    save_checkpoint(args.out, state, cfg)
    if args.history:
        _write_json(args.history, state.loss_history)
    print(f"trained {state.iteration} iterations, {len(state.cloud)} gaussians")
    return 0


def _centers(path):
    return np.stack([c.center for c in io.read_cameras(path)]) if path else None


def cmd_eval(args) -> int:
    renders = [io.read_ppm(p) for p in args.renders]
    gts = [io.read_ppm(p) for p in args.gts]
    names = args.names or [os.path.splitext(os.path.basename(p))[0] for p in args.renders]
    report = eval_report(renders, gts, _centers(args.traj_est), _centers(args.traj_gt), names)
    if args.out:
        with io.atomic_write(args.out) as fh:
            fh.write((report_json(report) + "\n").encode("utf-8"))
    print(report_table(report))
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)

    parser = argparse.ArgumentParser(prog="sparsegs", description="Sparse-view planar Gaussian splatting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="initialize a Gaussian cloud from a point cloud")
    p.add_argument("--points", required=True)
    p.add_argument("--cameras")
    p.add_argument("--conf-threshold", type=float, default=0.2)
    p.add_argument("--sh-degree", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("render", parents=[common], help="render colour, depth, normals and alpha")
    p.add_argument("--cloud", required=True)
    p.add_argument("--camera", required=True, help="cams.json#index")
    p.add_argument("--background", type=_floats, default=(0.0, 0.0, 0.0))
    p.add_argument("--depth", choices=("plane", "accum"), default="plane")
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--out-color")
    p.add_argument("--out-depth")
    p.add_argument("--out-normal")
    p.add_argument("--out-alpha")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("warp", parents=[common], help="forward-warp an image into another camera")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--confidence")
    p.add_argument("--src-camera", required=True)
    p.add_argument("--dst-camera", required=True)
    p.add_argument("--conf-threshold", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.add_argument("--out-mask")
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("pseudo-cams", parents=[common], help="circle-interpolated pseudo cameras")
    p.add_argument("--cameras", required=True)
    p.add_argument("--views-per-pair", type=int, default=2)
    p.add_argument("--deduplicate", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_cams)

    p = sub.add_parser("mask", parents=[common], help="patch-border mask")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--patch", type=int, default=14)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("loss", parents=[common], help="evaluate one loss term")
    p.add_argument("kind", choices=("photometric", "pearson", "normal", "scale"))
    p.add_argument("--pred", required=True, help="PPM, PFM or Gaussian PLY depending on the loss")
    p.add_argument("--target")
    p.add_argument("--confidence")
    p.add_argument("--mask")
    p.add_argument("--lambda-dssim", type=float, default=0.2)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--cloud", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--loss", nargs="+", default=["photometric"],
                   choices=("photometric", "pearson", "normal", "scale", "zero"))
    p.add_argument("--target-image")
    p.add_argument("--target-depth")
    p.add_argument("--depth", choices=("plane", "accum"), default="plane")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--strict", action="store_true", help="exit 3 when any group is flagged")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", parents=[common], help="optimize a Gaussian cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--views", required=True, help="JSON list of {camera, image, depth, confidence}")
    p.add_argument("--config")
    p.add_argument("--views-per-pair", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--log-every", type=int, default=0)
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("seed", "threads"):
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM/ATE report")
    p.add_argument("--renders", nargs="+", required=True)
    p.add_argument("--gts", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--traj-est")
    p.add_argument("--traj-gt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _log("error: --threads must be >= 1")
        return 2
    try:
        return args.func(args)
    except (SparseGSError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _log(f"error: {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
