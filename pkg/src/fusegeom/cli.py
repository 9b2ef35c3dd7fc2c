"""Batch command-line front end.

Exit codes: 0 success, 2 missing input, 3 malformed input, 4 partial degradation.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio
from .anchors import AnchorTemplate, joint_filter, label_2d_anchors, seed_anchor_arrays, select_top_k
from .boxes import Box3D, boxes2d_array, points_in_box_mask
from .calib import project_velo_to_image
from .config import ConfigError, PipelineConfig, load_config
from .errors import FusegeomError, TooFewPoints
from .evaluation import Difficulty, evaluate_ap, recall_at_k
from .plots import line_plot_svg
from .pointcloud import Frame, PointCloud
from .pseudolidar import box2d_mask, disparity_to_points, rectify_depth, statistical_filter

log = logging.getLogger("fusegeom")

EXIT_OK, EXIT_MISSING, EXIT_MALFORMED, EXIT_PARTIAL = 0, 2, 3, 4


def _num(x) -> str:
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_manifest(out: Path, command: str, cfg: PipelineConfig, args: dict, frames) -> None:
    manifest = {"command": command, "config": cfg.as_dict(), "args": args, "frames": list(frames)}
    dataio.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _select_frames(root: Path, selector: str | None) -> list[str]:
    if selector:
        return [f.strip() for f in selector.split(",") if f.strip()]
    frames = dataio.list_frames(root)
    if not frames:
        raise FileNotFoundError(f"no frames under {root / 'velodyne'}")
    return frames


def _run_frames(fn, jobs: list, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, jobs))


# --- synth --------------------------------------------------------------------------

def _synth_frame(job):
    root, frame_id, spec, suffix = job
    dataio.write_frame(dataio.synth_scene(spec), root, frame_id, suffix)
    return frame_id


def cmd_synth(cfg: PipelineConfig, args) -> int:
    out = Path(args.out)
    specs = []
    for i in range(args.num_frames):
        spec = dataio.SceneSpec(seed=cfg.seed + i, num_boxes=args.num_boxes, disparity_noise=args.noise,
                                surface_density=args.density, clutter_points=args.clutter)
        specs.append((out, f"{i:06d}", spec, args.disparity_format))
    frames = _run_frames(_synth_frame, specs, cfg.jobs)
    _write_manifest(out, "synth", cfg, {
        "out": str(out), "num_frames": args.num_frames, "num_boxes": args.num_boxes, "noise": args.noise,
        "density": args.density, "clutter": args.clutter, "disparity_format": args.disparity_format}, frames)
    print(f"synth: wrote {len(frames)} frames to {out}")
    return EXIT_OK


# --- project -------------------------------------------------------------------------

def _project_frame(job):
    root, out, frame_id, camera = job
    bundle = dataio.load_frame(root, frame_id, camera)
    proj = project_velo_to_image(bundle.calib, bundle.cloud)
    rows = [(i, _num(p.u), _num(p.v), _num(p.depth), int(p.in_front)) for i, p in enumerate(proj)]
    dataio.atomic_write_text(out / "project" / f"{frame_id}.csv", _csv_text(("index", "u", "v", "depth", "visible"), rows))
    return frame_id, len(rows)


def cmd_project(cfg: PipelineConfig, args) -> int:
    root, out = Path(cfg.root), Path(args.out)
    frames = _select_frames(root, getattr(args, "frames", None))
    results = _run_frames(_project_frame, [(root, out, f, cfg.camera) for f in frames], cfg.jobs)
    for frame_id, n in results:
        print(f"project {frame_id}: {n} points")
    _write_manifest(out, "project", cfg, {"out": str(out)}, frames)
    return EXIT_OK


# --- pseudo --------------------------------------------------------------------------

def _regions(mode: str, bundle: dataio.FrameBundle, pseudo: PointCloud, lidar: PointCloud, cfg, pred_records):
    """Yield (pseudo mask, lidar mask) per crop region."""
    if mode == "none":
        yield np.ones(len(pseudo), dtype=bool), np.ones(len(lidar), dtype=bool)
        return
    records = pred_records if mode == "pred2d" else [r for r in bundle.labels if r.type == cfg.class_name]
    for r in records:
        if mode == "gt3d":
            box = r.box3d(bundle.calib)
            yield points_in_box_mask(box, pseudo.xyz), points_in_box_mask(box, lidar.xyz)
        else:
            x1, y1, x2, y2 = r.bbox
            if not (x2 > x1 and y2 > y1):
                continue
            yield box2d_mask(bundle.calib, pseudo, r.box2d), box2d_mask(bundle.calib, lidar, r.box2d)


def _pseudo_frame(job):
    root, out, frame_id, cfg, opts = job
    bundle = dataio.load_frame(root, frame_id, cfg.camera, need=("velodyne", "calib", "disparity"))
    pred_records = []
    if opts["boxes"] == "pred2d":
        pred_path = Path(opts["pred_dir"]) / f"{frame_id}.txt"
        pred_records = [r for r in dataio.read_label_records(pred_path) if r.type == cfg.class_name] \
            if pred_path.exists() else []
    pseudo = disparity_to_points(bundle.calib, bundle.disparity, cfg.disparity_stride).cloud
    lidar = bundle.cloud
    stats = {"generated": len(pseudo), "cropped": 0, "filtered": 0, "final": 0, "regions": 0,
             "skipped_regions": 0, "offsets": []}
    taken = np.zeros(len(pseudo), dtype=bool)
    parts = []
    for p_mask, l_mask in _regions(opts["boxes"], bundle, pseudo, lidar, cfg, pred_records):
        p_mask = p_mask & ~taken
        taken |= p_mask
        region = pseudo.subset(p_mask)
        stats["regions"] += 1
        stats["cropped"] += len(region)
        if len(region) == 0:
            continue
        if opts["filter"]:
            try:
                res = statistical_filter(region, cfg.filter_k, cfg.filter_sigma)
                stats["filtered"] += len(res.removed)
                region = res.cloud
            except TooFewPoints:
                pass
        if opts["rectify"]:
            gt = lidar.subset(l_mask)
            if len(gt) == 0:
                stats["skipped_regions"] += 1
                continue
            region, rect = rectify_depth(region, PointCloud(gt.xyz), bundle.calib, cfg.rectify_k,
                                         cfg.rectify_range, cfg.rectify_step)
            stats["offsets"].append(rect.offset)
        parts.append(region)
    pseudo_out = PointCloud.concat(parts) if parts else PointCloud(np.zeros((0, 3)))
    pseudo_out = PointCloud(pseudo_out.xyz, Frame.VELODYNE, np.zeros(len(pseudo_out)))
    stats["final"] = len(pseudo_out)
    merged = PointCloud.concat([PointCloud(lidar.xyz, Frame.VELODYNE,
                                           lidar.reflectance if lidar.reflectance is not None else np.zeros(len(lidar))),
                                pseudo_out])
    dataio.write_velodyne(merged, out / "velodyne" / f"{frame_id}.bin")
    return frame_id, stats


def cmd_pseudo(cfg: PipelineConfig, args) -> int:
    root, out = Path(cfg.root), Path(args.out)
    if args.boxes == "pred2d" and not args.pred_dir:
        raise ConfigError("--boxes pred2d needs --pred-dir")
    frames = _select_frames(root, getattr(args, "frames", None))
    opts = {"boxes": args.boxes, "filter": args.filter, "rectify": args.rectify, "pred_dir": args.pred_dir}
    results = _run_frames(_pseudo_frame, [(root, out, f, cfg, opts) for f in frames], cfg.jobs)
    rows, skipped = [], 0
    for frame_id, s in results:
        offset = _num(np.mean(s["offsets"])) if s["offsets"] else ""
        print(f"pseudo {frame_id}: generated={s['generated']} cropped={s['cropped']} "
              f"filtered={s['filtered']} final={s['final']} offset={offset or 'n/a'}"
              + (f" skipped_regions={s['skipped_regions']}" if s["skipped_regions"] else ""))
        rows.append((frame_id, s["generated"], s["cropped"], s["filtered"], s["final"], s["regions"],
                     s["skipped_regions"], offset))
        skipped += s["skipped_regions"]
    dataio.atomic_write_text(out / "pseudo_stats.csv", _csv_text(
        ("frame", "generated", "cropped", "filtered", "final", "regions", "skipped_regions", "mean_offset"), rows))
    _write_manifest(out, "pseudo", cfg, {"out": str(out), **opts}, frames)
    if skipped:
        log.warning("%d regions had no LiDAR points to rectify against and were skipped", skipped)
        return EXIT_PARTIAL
    return EXIT_OK


# --- anchors -------------------------------------------------------------------------

def _anchors_frame(job):
    root, out, frame_id, cfg = job
    bundle = dataio.load_frame(root, frame_id, cfg.camera, need=("velodyne", "calib", "scores"))
    scores = bundle.point_scores
    fg = scores >= cfg.score_threshold
    template = AnchorTemplate(*cfg.anchor_size)
    b3, b2, src, dropped = seed_anchor_arrays(bundle.cloud.xyz[fg], bundle.calib, template,
                                              cfg.anchor_orientations, bundle.image_size)
    anchor_scores = scores[fg][src] if len(src) else np.zeros(0)
    gts = [r.box2d for r in bundle.labels
           if r.type == cfg.class_name and r.bbox[2] > r.bbox[0] and r.bbox[3] > r.bbox[1]]
    labels = label_2d_anchors(b2, boxes2d_array(gts), cfg.label_lo, cfg.label_hi)
    fg3d = anchor_scores >= cfg.score_threshold
    kept = np.asarray(joint_filter(labels, fg3d), dtype=int)
    selected = select_top_k(b3[kept], anchor_scores[kept], cfg.top_k, cfg.nms_iou) if kept.size else []
    lines = []
    for i in kept:
        box = Box3D.from_array(b3[i])
        cx, cy, w, h = b2[i]
        rec = dataio.box3d_to_record(box, bundle.calib, cfg.class_name, score=float(min(max(anchor_scores[i], 0.0), 1.0)),
                                     bbox=(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
        lines.append(rec.format())
    dataio.atomic_write_text(out / "anchors" / f"{frame_id}.txt", "".join(l + "\n" for l in lines))
    n_fg2d = sum(1 for lab in labels if lab.value == "foreground")
    n_bg2d = sum(1 for lab in labels if lab.value == "background")
    return frame_id, {"fg_points": int(fg.sum()), "seeded": len(src), "dropped": dropped, "fg2d": n_fg2d,
                      "bg2d": n_bg2d, "ignored2d": len(labels) - n_fg2d - n_bg2d, "fg3d": int(fg3d.sum()),
                      "joint": int(kept.size), "selected": len(selected)}


def cmd_anchors(cfg: PipelineConfig, args) -> int:
    root, out = Path(cfg.root), Path(args.out)
    frames = _select_frames(root, getattr(args, "frames", None))
    results = _run_frames(_anchors_frame, [(root, out, f, cfg) for f in frames], cfg.jobs)
    keys = ("fg_points", "seeded", "dropped", "fg2d", "bg2d", "ignored2d", "fg3d", "joint", "selected")
    rows = []
    for frame_id, s in results:
        print(f"anchors {frame_id}: " + " ".join(f"{k}={s[k]}" for k in keys))
        rows.append((frame_id, *(s[k] for k in keys)))
    dataio.atomic_write_text(out / "anchor_stats.csv", _csv_text(("frame", *keys), rows))
    _write_manifest(out, "anchors", cfg, {"out": str(out)}, frames)
    return EXIT_OK


# --- nms -----------------------------------------------------------------------------

def _nms_frame(job):
    root, dets_dir, out, frame_id, cfg = job
    calib = dataio.read_calib(dataio.frame_path(root, "calib", frame_id), cfg.camera)
    path = Path(dets_dir) / f"{frame_id}.txt"
    records = dataio.read_label_records(path) if path.exists() else []
    records = [r for r in records if r.type == cfg.class_name]
    boxes = np.array([r.box3d(calib).as_array() for r in records]).reshape(-1, 7)
    scores = np.array([r.score if r.score is not None else 0.0 for r in records])
    keep = select_top_k(boxes, scores, cfg.top_k, cfg.nms_iou) if records else []
    dataio.write_label_records([records[i] for i in keep], out / "dets" / f"{frame_id}.txt")
    return frame_id, len(records), len(keep)


def cmd_nms(cfg: PipelineConfig, args) -> int:
    root, out = Path(cfg.root), Path(args.out)
    frames = _select_frames(root, getattr(args, "frames", None))
    results = _run_frames(_nms_frame, [(root, args.dets, out, f, cfg) for f in frames], cfg.jobs)
    for frame_id, n_in, n_out in results:
        print(f"nms {frame_id}: {n_in} -> {n_out}")
    _write_manifest(out, "nms", cfg, {"out": str(out), "dets": str(args.dets)}, frames)
    return EXIT_OK


# --- eval / recall ---------------------------------------------------------------------

def _load_eval_inputs(cfg: PipelineConfig, dets_dir: Path, label_dir: Path, frames, mode: str):
    root = Path(cfg.root)
    dets, gts = [], []
    for frame_id in frames:
        calib = dataio.read_calib(dataio.frame_path(root, "calib", frame_id), cfg.camera)
        label_path = label_dir / f"{frame_id}.txt"
        if not label_path.exists():
            raise FileNotFoundError(label_path)
        gts += dataio.read_labels(label_path, calib, frame_id, mode, cfg.class_name)
        det_path = dets_dir / f"{frame_id}.txt"
        if det_path.exists():
            dets += dataio.read_detections(det_path, calib, frame_id, mode, cfg.class_name)
    return dets, gts


_LEVELS = (("easy", Difficulty.EASY), ("moderate", Difficulty.MODERATE), ("hard", Difficulty.HARD))


def cmd_eval(cfg: PipelineConfig, args) -> int:
    root, out = Path(cfg.root), Path(args.out)
    dets_dir = Path(args.dets)
    if not dets_dir.is_dir():
        raise FileNotFoundError(dets_dir)
    label_dir = Path(args.gts) if args.gts else root / "label_2"
    frames = _select_frames(root, getattr(args, "frames", None))
    dets, gts = _load_eval_inputs(cfg, dets_dir, label_dir, frames, cfg.eval_mode)
    rows, pr_rows, series = [], [], []
    for name, level in _LEVELS:
        res = evaluate_ap(dets, gts, cfg.eval_iou, cfg.eval_mode, cfg.interpolation, level)
        rows.append((cfg.class_name, cfg.eval_mode, _num(cfg.eval_iou), cfg.interpolation, name, _num(res.ap),
                     res.num_gt, res.num_tp, res.num_fp, int(res.defined)))
        print(f"eval {cfg.class_name} {cfg.eval_mode}@{cfg.eval_iou} R{cfg.interpolation} {name}: "
              f"AP={res.ap:.4f} gt={res.num_gt} tp={res.num_tp} fp={res.num_fp}")
        for rank, (t, r, p) in enumerate(zip(res.thresholds, res.recall, res.precision), 1):
            pr_rows.append((name, rank, _num(t), _num(r), _num(p)))
        series.append((f"{name} AP={res.ap:.3f}", list(res.recall), list(res.precision)))
    dataio.atomic_write_text(out / "ap.csv", _csv_text(
        ("class", "mode", "iou", "interpolation", "difficulty", "ap", "num_gt", "num_tp", "num_fp", "defined"), rows))
    dataio.atomic_write_text(out / "pr_curve.csv", _csv_text(("difficulty", "rank", "score", "recall", "precision"), pr_rows))
    dataio.atomic_write_text(out / "pr_curve.svg", line_plot_svg(
        series, f"{cfg.class_name} {cfg.eval_mode.upper()} IoU={cfg.eval_iou}", "recall", "precision"))
    _write_manifest(out, "eval", cfg, {"out": str(out), "dets": str(dets_dir), "gts": str(label_dir)}, frames)
    return EXIT_OK


def cmd_recall(cfg: PipelineConfig, args) -> int:
    root, out = Path(cfg.root), Path(args.out)
    props_dir = Path(args.proposals)
    if not props_dir.is_dir():
        raise FileNotFoundError(props_dir)
    label_dir = Path(args.gts) if args.gts else root / "label_2"
    frames = _select_frames(root, getattr(args, "frames", None))
    ks = sorted(int(k) for k in cfg.recall_k)
    dets, gts = _load_eval_inputs(cfg, props_dir, label_dir, frames, "3d")
    level = dict(_LEVELS)[args.difficulty]
    recalls = recall_at_k(dets, gts, cfg.eval_iou, ks, "3d", level)
    rows = [(k, _num(r)) for k, r in zip(ks, recalls)]
    for k, r in zip(ks, recalls):
        print(f"recall@{k} (IoU={cfg.eval_iou}, {args.difficulty}): {r:.4f}")
    dataio.atomic_write_text(out / "recall.csv", _csv_text(("k", "recall"), rows))
    top = max(ks) if ks else 1
    dataio.atomic_write_text(out / "recall.svg", line_plot_svg(
        [("recall", ks, recalls)], f"Proposal recall, IoU={cfg.eval_iou}", "number of RoIs", "recall",
        xlim=(0.0, float(top))))
    _write_manifest(out, "recall", cfg, {"out": str(out), "proposals": str(props_dir),
                                          "gts": str(label_dir), "difficulty": args.difficulty}, frames)
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


# config keys settable from any subcommand, with their flag spellings
_OVERRIDES = {
    "camera": ("--camera", int), "seed": ("--seed", int), "jobs": ("--jobs", int), "root": ("--root", str),
    "score_threshold": ("--score-threshold", float), "label_lo": ("--label-lo", float),
    "label_hi": ("--label-hi", float), "nms_iou": ("--nms-iou", float), "top_k": ("--top-k", int),
    "disparity_stride": ("--stride", int), "filter_k": ("--filter-k", int),
    "filter_sigma": ("--filter-sigma", float), "rectify_k": ("--rectify-k", int),
    "rectify_range": ("--rectify-range", float), "rectify_step": ("--rectify-step", float),
    "class_name": ("--class", str), "eval_mode": ("--mode", str), "eval_iou": ("--iou", float),
    "interpolation": ("--interpolation", int), "recall_k": ("--k", _int_list),
    "anchor_orientations": ("--orientations", _float_list),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of config overrides")
    p.add_argument("--frames", default=argparse.SUPPRESS, help="comma-separated frame ids (default: all)")
    for key, (flag, typ) in _OVERRIDES.items():
        p.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusegeom", description=__doc__.splitlines()[0])
    _add_common(parser)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        return p

    p = add("synth", "generate a synthetic KITTI-layout dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-frames", type=int, default=20)
    p.add_argument("--num-boxes", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.0, help="disparity noise std (px)")
    p.add_argument("--density", type=float, default=40.0, help="LiDAR points per m^2 of box face")
    p.add_argument("--clutter", type=int, default=3000)
    p.add_argument("--disparity-format", choices=(".png", ".f32"), default=".png")

    p = add("project", "project LiDAR points into the image")
    p.add_argument("--out", required=True)

    p = add("pseudo", "densify LiDAR with cropped, filtered, rectified pseudo-LiDAR")
    p.add_argument("--out", required=True)
    p.add_argument("--boxes", choices=("gt2d", "pred2d", "gt3d", "none"), default="gt2d")
    p.add_argument("--pred-dir", default=None, help="detections for --boxes pred2d")
    p.add_argument("--filter", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--rectify", action=argparse.BooleanOptionalAction, default=True)

    p = add("anchors", "seed, label and jointly filter anchors")
    p.add_argument("--out", required=True)

    p = add("nms", "rotated NMS plus top-k over a detection directory")
    p.add_argument("--dets", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", "average precision per difficulty")
    p.add_argument("--dets", required=True)
    p.add_argument("--gts", default=None, help="label directory (default: <root>/label_2)")
    p.add_argument("--out", required=True)

    p = add("recall", "proposal recall at several RoI counts")
    p.add_argument("--proposals", required=True)
    p.add_argument("--gts", default=None)
    p.add_argument("--difficulty", choices=("easy", "moderate", "hard"), default="moderate")
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {"synth": cmd_synth, "project": cmd_project, "pseudo": cmd_pseudo, "anchors": cmd_anchors,
            "nms": cmd_nms, "eval": cmd_eval, "recall": cmd_recall}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {k: getattr(args, k) for k in _OVERRIDES if hasattr(args, k)}
        cfg = load_config(getattr(args, "config", None), overrides)
        return COMMANDS[args.command](cfg, args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FusegeomError, ConfigError, ValueError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
