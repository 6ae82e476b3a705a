"""Command-line interface.

Subcommands: synth, associate, train, render, segment, edit, eval, gradcheck.
Global flags (accepted by every subcommand): --seed, --threads, --config
(JSON file of training-config overrides); every TrainConfig field is also an
individual flag (e.g. --lambda-2d, --knn-k). Unknown flags exit 2 with usage;
component failures exit 1 with a message.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields as dataclass_fields
from typing import List, Optional, Sequence

import numpy as np

from . import dataio
from .associate import IOU_MATCH_THRESHOLD, associate_masks_greedy
from .editor import FinetuneTarget, apply_edit_script
from .gradcheck import run_gradient_suite
from .metrics import match_ids, mbiou, miou, psnr, ssim
from .rasterizer import render_forward
from .scene import InitConfig, init_scene
from .synth import BlobSceneSpec, ShellSceneSpec, make_blob_dataset, \
    make_shell_dataset, shuffle_mask_labels
from .trainer import TrainConfig, TrainingView, train

# ---------------------------------------------------------------------------
# training-config flags

_CONFIG_FIELD_TYPES = {
    "iterations": int,
    "lr_position": float,
    "lr_position_final": float,
    "lr_sh": float,
    "lr_opacity": float,
    "lr_scale": float,
    "lr_rotation": float,
    "lr_identity": float,
    "lr_classifier": float,
    "lambda_2d": float,
    "lambda_3d": float,
    "knn_k": int,
    "knn_m": int,
    "neighbor_grad": bool,
    "densify_interval": int,
    "densify_from": int,
    "densify_until": int,
    "grad_threshold": float,
    "size_threshold": float,
    "prune_opacity": float,
    "prune_size": float,
    "prune_screen_size": float,
    "opacity_reset_interval": int,
    "seed": int,        # set from the global --seed flag instead
    "background": tuple,
}


def _parse_rgb(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected R,G,B")
    return tuple(parts)


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    covered = {f.name for f in dataclass_fields(TrainConfig)}
    missing = covered - set(_CONFIG_FIELD_TYPES)
    if missing:
        raise RuntimeError(f"unmapped TrainConfig fields: {sorted(missing)}")
    for field in dataclass_fields(TrainConfig):
        if field.name == "seed":
            continue
        flag = "--" + field.name.replace("_", "-")
        kind = _CONFIG_FIELD_TYPES[field.name]
        if kind is bool:
            parser.add_argument(flag, default=None,
                                action=argparse.BooleanOptionalAction)
        elif kind is tuple:
            parser.add_argument(flag, default=None, type=_parse_rgb,
                                metavar="R,G,B")
        elif field.name == "iterations":
            parser.add_argument("--iterations", "--iters", dest="iterations",
                                default=None, type=int)
        else:
            parser.add_argument(flag, default=None, type=kind)


def _build_train_config(args: argparse.Namespace) -> TrainConfig:
    config = TrainConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="ascii") as fh:
            overrides = json.load(fh)
        valid = {f.name for f in dataclass_fields(TrainConfig)}
        for key, value in overrides.items():
            if key not in valid:
                raise ValueError(f"unknown config key '{key}'")
            if key == "background":
                value = tuple(value)
            setattr(config, key, value)
    for field in dataclass_fields(TrainConfig):
        if field.name == "seed":
            continue
        value = getattr(args, field.name, None)
        if value is not None:
            setattr(config, field.name, value)
    config.seed = args.seed
    return config


def _parallel_map(fn, items: Sequence, threads: int) -> List:
    """Ordered map; results are position-stable regardless of thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# segmentation helpers

def segment_view(scene, camera) -> np.ndarray:
    """Render and classify: per-pixel argmax channel + 1 where accumulated
    alpha > 0.5, else 0 (unlabeled)."""
    out = render_forward(scene, camera)
    logits = scene.classifier.logits(out.identity_image)
    label = np.argmax(logits, axis=2).astype(np.uint16) + 1
    alpha = 1.0 - out.final_transmittance
    return np.where(alpha > 0.5, label, 0).astype(np.uint16)


def identity_pca_image(identity_image: np.ndarray) -> np.ndarray:
    """Project 16-channel identity features onto their top-3 principal axes
    and normalize to an RGB image. Component signs are fixed so the largest
    loading is positive, making the output deterministic."""
    h, w, c = identity_image.shape
    flat = identity_image.reshape(-1, c)
    centered = flat - flat.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:3].copy()
    for i in range(axes.shape[0]):
        pivot = np.argmax(np.abs(axes[i]))
        if axes[i, pivot] < 0:
            axes[i] = -axes[i]
    proj = centered @ axes.T
    if proj.shape[1] < 3:  # degenerate feature rank
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    lo = proj.min(axis=0, keepdims=True)
    hi = proj.max(axis=0, keepdims=True)
    span = np.where(hi - lo > 1.0e-12, hi - lo, 1.0)
    rgb = (proj - lo) / span
    rgb[:, (hi - lo).ravel() <= 1.0e-12] = 0.5
    return rgb.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_synth(args: argparse.Namespace) -> int:
    if args.kind == "blobs":
        spec = BlobSceneSpec(
            n_blobs=args.blobs, per_blob=args.per_blob,
            splat_scale=args.splat_scale, dome_points=args.dome_points,
            n_cameras=args.views, test_cameras=args.test_views,
            camera_radius=args.camera_radius, image_size=args.image_size,
            focal=args.focal, channels=args.channels)
        data = make_blob_dataset(spec, seed=args.seed)
    else:
        spec = ShellSceneSpec(n_cameras=args.views, image_size=args.image_size,
                              channels=args.channels)
        data = make_shell_dataset(spec, seed=args.seed)

    n_train = data.n_train
    raw = shuffle_mask_labels(data.masks, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    dataio.save_dataset(args.out, data.cameras[:n_train], data.images[:n_train],
                        data.masks[:n_train], raw[:n_train],
                        data.points, data.point_colors)
    gt_dir = os.path.join(args.out, "masks_gt")
    os.makedirs(gt_dir, exist_ok=True)
    for i in range(n_train):
        dataio.save_mask(os.path.join(gt_dir, f"{i:03d}.png"), data.masks[i])
    dataio.save_scene(data.scene, os.path.join(args.out, "gt_scene.ply"))
    if len(data.cameras) > n_train:
        test_dir = os.path.join(args.out, "test")
        dataio.save_dataset(test_dir, data.cameras[n_train:],
                            data.images[n_train:], data.masks[n_train:])
    print(f"synth: {n_train} training views"
          f" (+{len(data.cameras) - n_train} held-out) -> {args.out}")
    return 0


def _cmd_associate(args: argparse.Namespace) -> int:
    raw_dir = os.path.join(args.data, args.raw_dir)
    names = sorted(n for n in os.listdir(raw_dir) if n.endswith(".png"))
    if not names:
        raise ValueError(f"no mask PNGs in {raw_dir}")
    masks = [dataio.load_mask(os.path.join(raw_dir, n)) for n in names]
    out = associate_masks_greedy(masks, iou_threshold=args.iou_threshold,
                                 min_new_area=args.min_area)
    out_dir = os.path.join(args.data, args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    for name, mask in zip(names, out):
        dataio.save_mask(os.path.join(out_dir, name), mask)
    num_ids = max(int(m.max()) for m in out)
    print(f"associate: {len(out)} views, {num_ids} ids -> {out_dir}")
    return 0


def _load_views(data_dir: str, with_masks: bool):
    meta, images, masks = dataio.load_dataset(data_dir, with_masks=with_masks)
    views = [TrainingView(camera=rec.camera, image=img, mask=mask)
             for rec, img, mask in zip(meta.views, images, masks)]
    return meta, views, images, masks


def _cmd_train(args: argparse.Namespace) -> int:
    config = _build_train_config(args)
    meta, views, _, _ = _load_views(args.data, with_masks=not args.no_masks)
    if args.no_masks:
        config.lambda_2d = 0.0
        config.lambda_3d = 0.0
        views = [TrainingView(v.camera, v.image, None) for v in views]

    if args.init_scene:
        scene = dataio.load_scene(args.init_scene)
    else:
        points, colors = dataio.load_points(os.path.join(args.data, "points.ply"))
        channels = args.channels if args.channels is not None \
            else max(16, meta.num_ids)
        scene = init_scene(points, colors,
                           InitConfig(sh_degree=args.sh_degree, channels=channels),
                           seed=args.seed)
    if meta.num_ids > scene.classifier.channels:
        raise ValueError(f"dataset has {meta.num_ids} ids but the classifier"
                         f" only has {scene.classifier.channels} channels")

    trained, log = train(scene, views, config,
                         log_fn=(lambda rec: print(
                             f"iter {rec['iteration']:6d}  l_rec {rec['l_rec']:.4f}"
                             f"  l_2d {rec['l_2d']:.4f}  l_3d {rec['l_3d']:.4f}"
                             f"  splats {rec['gaussian_count']}"))
                         if args.verbose else None)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    dataio.save_scene(trained, args.out)
    log_path = args.log or (args.out + ".log.jsonl")
    dataio.write_training_log(log_path, log)
    print(f"train: {config.iterations} iterations, {len(trained)} splats"
          f" -> {args.out}")
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    scene = dataio.load_scene(args.scene)
    meta, _, _ = dataio.load_dataset(args.data, with_masks=False)
    os.makedirs(args.out, exist_ok=True)

    def render_one(item):
        index, record = item
        image = render_forward(scene, record.camera).color
        dataio.save_image(os.path.join(args.out, f"{index:03d}.png"), image)
        return index

    _parallel_map(render_one, list(enumerate(meta.views)), args.threads)
    print(f"render: {len(meta.views)} views -> {args.out}")
    return 0


def _cmd_segment(args: argparse.Namespace) -> int:
    scene = dataio.load_scene(args.scene)
    meta, _, _ = dataio.load_dataset(args.data, with_masks=False)
    os.makedirs(args.out, exist_ok=True)

    def segment_one(item):
        index, record = item
        out = render_forward(scene, record.camera)
        logits = scene.classifier.logits(out.identity_image)
        label = np.argmax(logits, axis=2).astype(np.uint16) + 1
        alpha = 1.0 - out.final_transmittance
        id_map = np.where(alpha > 0.5, label, 0).astype(np.uint16)
        dataio.save_mask(os.path.join(args.out, f"{index:03d}.png"), id_map)
        vis = identity_pca_image(out.identity_image)
        dataio.save_image(os.path.join(args.out, f"{index:03d}_features.png"), vis)
        return index

    _parallel_map(segment_one, list(enumerate(meta.views)), args.threads)
    print(f"segment: {len(meta.views)} views -> {args.out}")
    return 0


def _cmd_edit(args: argparse.Namespace) -> int:
    scene = dataio.load_scene(args.scene)
    script = dataio.load_edit_script(args.script)

    target_loader = None
    if args.data:
        meta, _, images, _ = _load_views(args.data, with_masks=False)

        def target_loader(params):
            indices = params.get("views", list(range(len(meta.views))))
            image_dir = params.get("images")
            region_dir = params.get("region_masks")
            targets = []
            for i in indices:
                image = dataio.load_image(
                    os.path.join(args.data, image_dir, f"{i:03d}.png")) \
                    if image_dir else images[i]
                region = None
                if region_dir:
                    region = dataio.load_mask(os.path.join(
                        args.data, region_dir, f"{i:03d}.png")).astype(bool)
                targets.append(FinetuneTarget(meta.views[i].camera, image, region))
            return targets

    edited = apply_edit_script(scene, script, target_loader)
    dataio.save_scene(edited, args.out)
    print(f"edit: {len(script.operations)} ops, {len(edited)} splats -> {args.out}")
    return 0


def _read_mask_dir(path: str) -> List[np.ndarray]:
    names = sorted(n for n in os.listdir(path)
                   if n.endswith(".png") and "_features" not in n)
    return [dataio.load_mask(os.path.join(path, n)) for n in names]


def _cmd_eval(args: argparse.Namespace) -> int:
    rows = []
    header = ["view", "psnr", "ssim", "miou", "mbiou"]
    if args.pred_masks:
        if not args.gt_masks:
            raise ValueError("--pred-masks requires --gt-masks")
        pred = _read_mask_dir(args.pred_masks)
        gt = _read_mask_dir(args.gt_masks)
        if len(pred) != len(gt):
            raise ValueError("prediction and ground-truth view counts differ")
        pairs = match_ids(pred, gt) if args.match_ids else None
        for i, (p, t) in enumerate(zip(pred, gt)):
            rows.append([i, "", "", miou(p, t, id_pairs=pairs),
                         mbiou(p, t, id_pairs=pairs)])
    else:
        if not (args.scene and args.data):
            raise ValueError("eval needs --scene and --data, or mask dirs")
        scene = dataio.load_scene(args.scene)
        meta, images, masks = dataio.load_dataset(args.data)
        have_masks = all(m is not None for m in masks)

        def eval_one(item):
            index, record = item
            out = render_forward(scene, record.camera)
            pred_mask = None
            if have_masks:
                logits = scene.classifier.logits(out.identity_image)
                label = np.argmax(logits, axis=2).astype(np.uint16) + 1
                alpha = 1.0 - out.final_transmittance
                pred_mask = np.where(alpha > 0.5, label, 0).astype(np.uint16)
            return (psnr(out.color, images[index]),
                    ssim(out.color, images[index]), pred_mask)

        results = _parallel_map(eval_one, list(enumerate(meta.views)),
                                args.threads)
        pairs = None
        if have_masks and args.match_ids:
            pairs = match_ids([r[2] for r in results], masks)
        for i, (p, s, pred_mask) in enumerate(results):
            if have_masks:
                rows.append([i, p, s, miou(pred_mask, masks[i], id_pairs=pairs),
                             mbiou(pred_mask, masks[i], id_pairs=pairs)])
            else:
                rows.append([i, p, s, "", ""])

    def mean_of(col):
        vals = [r[col] for r in rows if r[col] != ""]
        return float(np.mean(vals)) if vals else ""

    rows.append(["mean", mean_of(1), mean_of(2), mean_of(3), mean_of(4)])
    target = open(args.out, "w", newline="", encoding="ascii") \
        if args.out else sys.stdout
    try:
        writer = csv.writer(target)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v
                             for v in row])
    finally:
        if args.out:
            target.close()
    if args.out:
        print(f"eval: {len(rows) - 1} views -> {args.out}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.gaussians > 20:
        raise ValueError("gradient suite is specified for at most 20 splats")
    report = run_gradient_suite(n_gaussians=args.gaussians, size=args.size,
                                sh_degree=args.sh_degree, seed=args.seed)
    for line in report.summary_lines():
        print(line)
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-view parallel sections")
    common.add_argument("--config", default=None,
                        help="JSON file of training-config overrides")

    parser = argparse.ArgumentParser(
        prog="groupsplat",
        description="CPU differentiable Gaussian splatting with per-splat"
                    " identity encodings for group-level editing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset with exact masks")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("blobs", "shell"), default="blobs")
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--per-blob", type=int, default=350)
    p.add_argument("--splat-scale", type=float, default=0.04)
    p.add_argument("--dome-points", type=int, default=900)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--test-views", type=int, default=4)
    p.add_argument("--camera-radius", type=float, default=4.0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--focal", type=float, default=70.0)
    p.add_argument("--channels", type=int, default=64)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("associate", parents=[common],
                       help="relabel per-view masks into consistent ids")
    p.add_argument("--data", required=True)
    p.add_argument("--raw-dir", default="masks_raw")
    p.add_argument("--out-dir", default="masks")
    p.add_argument("--iou-threshold", type=float, default=IOU_MATCH_THRESHOLD)
    p.add_argument("--min-area", type=int, default=None)
    p.set_defaults(func=_cmd_associate)

    p = sub.add_parser("train", parents=[common],
                       help="optimize a scene against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-scene", default=None,
                   help="PLY to continue from (default: init from points.ply)")
    p.add_argument("--no-masks", action="store_true",
                   help="reconstruction-only training")
    p.add_argument("--sh-degree", type=int, default=3)
    p.add_argument("--channels", type=int, default=None,
                   help="classifier channels (default max(16, dataset ids))")
    p.add_argument("--log", default=None, help="training-log path (JSONL)")
    p.add_argument("--verbose", action="store_true")
    _add_train_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", parents=[common],
                       help="render dataset views from a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("segment", parents=[common],
                       help="write per-view ID maps and feature visualizations")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_segment)

    p = sub.add_parser("edit", parents=[common],
                       help="apply an edit script to a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None,
                   help="dataset supplying fine-tune target views")
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("eval", parents=[common],
                       help="PSNR/SSIM/mIoU/mBIoU table as CSV")
    p.add_argument("--scene", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--pred-masks", default=None)
    p.add_argument("--gt-masks", default=None)
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.add_argument("--match-ids", default=True,
                   action=argparse.BooleanOptionalAction,
                   help="greedy-match predicted ids to ground-truth ids")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient verification")
    p.add_argument("--gaussians", type=int, default=20)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--sh-degree", type=int, default=3)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
