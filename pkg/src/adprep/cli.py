"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error. Machine-readable output
(JSON or CSV) goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .crossview import (
    AugmentationSpec,
    EmptyMatchWarning,
    MatchConfig,
    consistency_loss,
    match_cross_view,
    promote_unknowns,
)
from .geometry import cloud_to_range_image, range_image_to_cloud, resample_beams
from .io import (
    labels_to_jsonl,
    load_dataset_config,
    read_inclinations,
    read_labels,
    read_point_cloud,
    read_proposals,
    write_labels,
    write_point_cloud,
)
from .labeling import (
    CLASSES,
    DEFAULT_THRESHOLDS,
    ONCE_CLASS_MAP,
    ONCE_IOU_THRESHOLDS,
    apply_class_map,
    average_precision_once,
    committee_merge,
    filter_by_threshold,
    frame_statistics,
    precision_at_iou,
    threshold_sweep,
)
from .pipeline import FrameJob, FrameState, ObjectRescale, PipelineConfig, SeedStream, run_pipeline_on_disk

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

log = logging.getLogger("adprep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _emit_csv(header, rows) -> None:
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _key_values(items, what: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"{what} must look like NAME=VALUE, got {item!r}")
        out[key] = value
    return out


def _float_map(items, what: str, base: dict | None = None) -> dict[str, float]:
    out = dict(base or {})
    for k, v in _key_values(items, what).items():
        try:
            out[k] = float(v)
        except ValueError:
            raise UsageError(f"{what} value for {k} is not a number: {v!r}") from None
    return out


def _class_map(arg: str | None):
    if arg is None or arg == "none":
        return None
    if arg == "once":
        return dict(ONCE_CLASS_MAP)
    with open(arg) as f:
        return json.load(f)


def _feature_dim(args) -> int:
    return args.dim if args.dim is not None else load_dataset_config(args.dataset).feature_dim


# --- subcommands ---------------------------------------------------------------


def cmd_resample(args) -> int:
    if args.beams < 1:
        raise UsageError("--beams must be >= 1")
    if args.cols < 1:
        raise UsageError("--cols must be >= 1")
    dim = _feature_dim(args)
    cloud = read_point_cloud(args.input, dim)
    incl = read_inclinations(args.inclinations)
    img = cloud_to_range_image(cloud, incl, args.cols)
    out_img = resample_beams(img, args.beams)
    out = range_image_to_cloud(out_img)
    write_point_cloud(out, args.output, dim)
    _emit_json(
        {
            "input_points": len(cloud),
            "occupied_cells": int(np.count_nonzero(img.ranges)),
            "output_points": len(out),
            "source_beams": img.n_beams,
            "target_beams": out_img.n_beams,
        }
    )
    return EXIT_OK


def _pick_frame(frames, cloud_path: Path):
    if len(frames) == 1:
        return frames[0]
    matches = [f for f in frames if f.frame_id == cloud_path.stem]
    if len(matches) != 1:
        raise ValueError(f"cannot pick a label record for {cloud_path.name}: {len(frames)} frames, none uniquely matching")
    return matches[0]


def cmd_rescale(args) -> int:
    if not args.alpha_min > 0:
        raise UsageError("--alpha-min must be positive")
    if args.alpha_min > args.alpha_max:
        raise UsageError("--alpha-min must not exceed --alpha-max")
    dim = _feature_dim(args)
    cloud = read_point_cloud(args.input_cloud, dim)
    frame = _pick_frame(read_labels(args.input_labels), Path(args.input_cloud))

    state = FrameState(cloud, frame)
    ObjectRescale((args.alpha_min, args.alpha_max), args.remove_occluded)(state, SeedStream(args.seed).rng(frame.frame_id))
    alphas: dict[str, list[float]] = {}
    for cls, alpha in state.alphas:
        alphas.setdefault(cls, []).append(alpha)

    write_point_cloud(state.cloud, args.output_cloud, dim)
    write_labels([state.frame], args.output_labels)
    hist = {}
    for cls, vals in sorted(alphas.items()):
        counts, edges = np.histogram(vals, bins=10, range=(args.alpha_min, args.alpha_max))
        hist[cls] = {"counts": counts.tolist(), "edges": edges.tolist()}
    _emit_json(
        {
            "frame_id": frame.frame_id,
            "boxes": len(state.frame.detections),
            "output_points": len(state.cloud),
            "alpha_histogram": hist,
        }
    )
    return EXIT_OK


def cmd_filter_labels(args) -> int:
    policy = _float_map(args.threshold, "--threshold", DEFAULT_THRESHOLDS)
    for k, v in policy.items():
        if not 0 <= v <= 1:
            raise UsageError(f"threshold for {k} must be in [0, 1]")
    cmap = _class_map(args.class_map)
    frames = read_labels(args.input)
    out = []
    for f in frames:
        if cmap is not None:
            f = apply_class_map(f, cmap)
        out.append(filter_by_threshold(f, policy))
    if args.output:
        write_labels(out, args.output)
        _emit_json(
            {
                "frames": len(out),
                "input_detections": sum(len(f.detections) for f in frames),
                "kept_detections": sum(len(f.detections) for f in out),
            }
        )
    else:
        sys.stdout.write(labels_to_jsonl(out))
    return EXIT_OK


def cmd_merge(args) -> int:
    sources = _key_values(args.source, "--source")
    if not sources:
        raise UsageError("at least one --source NAME=FILE is required")
    assignment = _key_values(args.assign, "--assign") or None
    if assignment is None:
        raise UsageError("at least one --assign CLASS=SOURCE is required")
    by_source = {name: {f.frame_id: f for f in read_labels(path)} for name, path in sources.items()}
    frame_ids = list(dict.fromkeys(fid for frames in by_source.values() for fid in frames))
    merged = []
    for fid in frame_ids:
        missing = [s for s, frames in by_source.items() if fid not in frames]
        if missing:
            raise ValueError(f"frame {fid!r} missing from source(s) {missing}")
        merged.append(committee_merge({s: frames[fid] for s, frames in by_source.items()}, assignment))
    sys.stdout.write(labels_to_jsonl(merged))
    return EXIT_OK


def cmd_stats(args) -> int:
    frames = []
    for path in args.labels:
        frames.extend(read_labels(path))
    stats = frame_statistics(frames, args.classes or CLASSES)
    _emit_csv(["class", "instances_per_frame"], [[c, f"{v:.2f}"] for c, v in stats.items()])
    return EXIT_OK


def cmd_eval(args) -> int:
    ious = _float_map(args.iou, "--iou", ONCE_IOU_THRESHOLDS)
    preds, gts = read_labels(args.pred), read_labels(args.gt)
    classes = args.classes or list(CLASSES)
    for c in classes:
        if c not in ious:
            raise UsageError(f"no IoU threshold for class {c}; pass --iou {c}=VALUE")
        if not 0 < ious[c] <= 1:
            raise UsageError(f"IoU threshold for {c} must be in (0, 1]")
    if args.sweep:
        try:
            grid = [float(v) for v in args.sweep.split(",")]
        except ValueError:
            raise UsageError("--sweep must be a comma-separated list of numbers") from None
        rows = []
        for c in classes:
            for r in threshold_sweep(preds, gts, ious[c], c, grid, args.iou_mode):
                rows.append([c, ious[c], r["score_threshold"], r["tp"], r["fp"], f"{r['precision']:.4f}"])
        _emit_csv(["class", "iou_threshold", "score_threshold", "tp", "fp", "precision"], rows)
        return EXIT_OK
    rows = []
    for c in classes:
        ap = average_precision_once(preds, gts, c, ious[c], args.iou_mode)
        prec = precision_at_iou(preds, gts, ious[c], c, args.iou_mode)
        rows.append([c, ious[c], "" if ap is None else f"{ap:.2f}", f"{prec:.4f}"])
    _emit_csv(["class", "iou_threshold", "ap", "precision"], rows)
    return EXIT_OK


def _read_spec(path) -> AugmentationSpec:
    if path is None:
        return AugmentationSpec()
    with open(path) as f:
        return AugmentationSpec.from_dict(json.load(f))


def cmd_match(args) -> int:
    if args.top_m < 1 or not args.tau > 0 or args.batch_size < 1:
        raise UsageError("--top-m and --batch-size must be >= 1 and --tau positive")
    v1, v2 = read_proposals(args.view1), read_proposals(args.view2)
    s1, s2 = _read_spec(args.spec1), _read_spec(args.spec2)
    matches = match_cross_view(v1, v2, s1, s2, MatchConfig(args.top_m, args.tau))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMatchWarning)
        loss = consistency_loss(matches, v1, v2, args.batch_size, args.reduction)
    if matches.K == 0:
        log.warning("no cross-view matches; loss defined as 0")
    p1, p2 = promote_unknowns(v1, v2, matches)
    _emit_json(
        {
            "K": matches.K,
            "pairs": [[i, j, d] for i, j, d in matches.pairs],
            "loss": loss,
            "empty": matches.K == 0,
            "promoted": {
                "view1": [k for k, (a, b) in enumerate(zip(v1, p1)) if a.label != b.label],
                "view2": [k for k, (a, b) in enumerate(zip(v2, p2)) if a.label != b.label],
            },
        }
    )
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    dataset = load_dataset_config(args.dataset)
    with open(args.config) as f:
        cfg_doc = json.load(f)
    if args.seed is not None:
        cfg_doc["seed"] = args.seed
    config = PipelineConfig.from_dict(cfg_doc, dataset)
    frames = read_labels(args.labels)
    base = Path(args.cloud_dir) if args.cloud_dir else Path(args.labels).parent
    jobs = [
        FrameJob(f, str(base / (f.cloud_ref or f"{f.frame_id}.bin")), dataset.feature_dim) for f in frames
    ]
    summary = run_pipeline_on_disk(jobs, config, args.output, args.workers, progress=args.progress)
    _emit_json(summary)
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _add_dim(p):
    p.add_argument("--dataset", default="once", help="dataset preset or JSON config (default: once)")
    p.add_argument("--dim", type=int, default=None, help="features per point; overrides --dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adprep", description="Lidar pre-training data preparation tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("resample", help="point-to-beam re-sampling through a range image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beams", type=int, required=True, help="target beam count")
    p.add_argument("--inclinations", required=True, help="file of source beam inclinations (radians)")
    p.add_argument("--cols", type=int, default=1800, help="range image columns (default: 1800)")
    _add_dim(p)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("rescale", help="randomly re-scale labeled objects")
    p.add_argument("--input-cloud", required=True)
    p.add_argument("--input-labels", required=True)
    p.add_argument("--output-cloud", required=True)
    p.add_argument("--output-labels", required=True)
    p.add_argument("--alpha-min", type=float, default=0.9)
    p.add_argument("--alpha-max", type=float, default=1.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--remove-occluded", action="store_true", help="drop background points inside enlarged boxes")
    _add_dim(p)
    p.set_defaults(func=cmd_rescale)

    p = sub.add_parser("filter-labels", help="apply per-class confidence thresholds")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--threshold", action="append", metavar="CLASS=VALUE", help="default Vehicle=0.8 Pedestrian=0.7 Cyclist=0.7")
    p.add_argument("--class-map", default="none", help="once, none, or a JSON file mapping source to unified classes")
    p.set_defaults(func=cmd_filter_labels)

    p = sub.add_parser("merge", help="class-wise committee merge of several detectors' labels")
    p.add_argument("--source", action="append", metavar="NAME=FILE", required=True)
    p.add_argument("--assign", action="append", metavar="CLASS=NAME", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("stats", help="instances per frame, per class (CSV)")
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--classes", nargs="+")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("eval", help="ONCE-style AP and precision (CSV)")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", nargs="+")
    p.add_argument("--iou", action="append", metavar="CLASS=VALUE", help="default Vehicle=0.7 Pedestrian=0.3 Cyclist=0.5")
    p.add_argument("--iou-mode", choices=("3d", "bev"), default="3d")
    p.add_argument("--sweep", help="comma-separated score thresholds for a precision sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="cross-view proposal matching and consistency loss (JSON)")
    p.add_argument("--view1", required=True)
    p.add_argument("--view2", required=True)
    p.add_argument("--spec1")
    p.add_argument("--spec2")
    p.add_argument("--top-m", type=int, default=256)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--reduction", choices=("mean", "sum"), default="mean")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("pipeline", help="run a configured processing pipeline over a corpus")
    p.add_argument("--labels", required=True, help="JSONL with one record per frame")
    p.add_argument("--cloud-dir", help="directory holding <frame_id>.bin (default: next to --labels)")
    p.add_argument("--config", required=True, help="pipeline JSON")
    p.add_argument("--dataset", default="once")
    p.add_argument("--output", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", False) else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"adprep {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"adprep {args.command}: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
