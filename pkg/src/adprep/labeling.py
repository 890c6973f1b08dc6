"""Pseudo-label handling: taxonomy mapping, class-wise committee merging,
confidence filtering, per-frame statistics and ONCE-style evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boxes import Box3D, iou_3d, iou_bev

VEHICLE, PEDESTRIAN, CYCLIST = "Vehicle", "Pedestrian", "Cyclist"
CLASSES = (VEHICLE, PEDESTRIAN, CYCLIST)

ONCE_CLASS_MAP = {
    "Car": VEHICLE,
    "Bus": VEHICLE,
    "Truck": VEHICLE,
    "Vehicle": VEHICLE,
    "Pedestrian": PEDESTRIAN,
    "Cyclist": CYCLIST,
}

# detections scoring below these are dropped
DEFAULT_THRESHOLDS = {VEHICLE: 0.8, PEDESTRIAN: 0.7, CYCLIST: 0.7}

# anchor-head PV-RCNN++ for Vehicle/Cyclist, CenterPoint for Pedestrian
DEFAULT_COMMITTEE = {VEHICLE: "pv_rcnn_pp", PEDESTRIAN: "centerpoint", CYCLIST: "pv_rcnn_pp"}

ONCE_IOU_THRESHOLDS = {VEHICLE: 0.7, PEDESTRIAN: 0.3, CYCLIST: 0.5}

RECALL_STEPS = 50


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_name: str
    score: float = 1.0
    source: str = ""

    def __post_init__(self):
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {score}")
        object.__setattr__(self, "score", score)


@dataclass(frozen=True)
class LabeledFrame:
    frame_id: str
    detections: tuple[Detection, ...] = ()
    cloud_ref: str | None = None

    def __post_init__(self):
        if not self.frame_id:
            raise ValueError("frame_id must be non-empty")
        object.__setattr__(self, "detections", tuple(self.detections))

    def with_detections(self, detections: Iterable[Detection]) -> "LabeledFrame":
        return replace(self, detections=tuple(detections))


def apply_class_map(frame: LabeledFrame, class_map: Mapping[str, str]) -> LabeledFrame:
    """Rename every detection's class through ``class_map``.

    Raises:
      KeyError: a detection's class is not in the map's source vocabulary.
    """
    out = []
    for det in frame.detections:
        if det.class_name not in class_map:
            raise KeyError(f"class {det.class_name!r} in frame {frame.frame_id!r} is not in the class map")
        out.append(replace(det, class_name=class_map[det.class_name]))
    return frame.with_detections(out)


def committee_merge(
    frames_by_source: Mapping[str, LabeledFrame], assignment: Mapping[str, str]
) -> LabeledFrame:
    """Keep, for each class, only the detections of the source assigned to it.

    Output order follows the assignment's class order, then detection order
    within the source frame.
    """
    if not frames_by_source:
        raise ValueError("no source frames given")
    ids = {f.frame_id for f in frames_by_source.values()}
    if len(ids) != 1:
        raise ValueError(f"source frames disagree on frame_id: {sorted(ids)}")
    missing = sorted({src for src in assignment.values() if src not in frames_by_source})
    if missing:
        raise KeyError(f"no frame for assigned source(s): {', '.join(missing)}")

    first = next(iter(frames_by_source.values()))
    merged = []
    for cls, src in assignment.items():
        merged.extend(d for d in frames_by_source[src].detections if d.class_name == cls)
    return first.with_detections(merged)


def filter_by_threshold(frame: LabeledFrame, policy: Mapping[str, float]) -> LabeledFrame:
    """Drop detections scoring strictly below their class threshold."""
    kept = []
    for det in frame.detections:
        if det.class_name not in policy:
            raise KeyError(f"no threshold for class {det.class_name!r}")
        if det.score >= policy[det.class_name]:
            kept.append(det)
    return frame.with_detections(kept)


def frame_statistics(
    frames: Sequence[LabeledFrame], classes: Sequence[str] = CLASSES
) -> dict[str, float]:
    """Mean number of detections per frame for each class.

    Classes outside ``classes`` that appear in the frames are appended in
    first-seen order.
    """
    if len(frames) == 0:
        raise ValueError("frame_statistics needs at least one frame")
    counts = {c: 0 for c in classes}
    for f in frames:
        for d in f.detections:
            counts[d.class_name] = counts.get(d.class_name, 0) + 1
    return {c: n / len(frames) for c, n in counts.items()}


def _align(predictions: Sequence[LabeledFrame], ground_truth: Sequence[LabeledFrame]):
    gt_by_id = {f.frame_id: f for f in ground_truth}
    pred_by_id = {f.frame_id: f for f in predictions}
    if len(gt_by_id) != len(ground_truth) or len(pred_by_id) != len(predictions):
        raise ValueError("duplicate frame_id in predictions or ground truth")
    if set(gt_by_id) != set(pred_by_id):
        only_p = sorted(set(pred_by_id) - set(gt_by_id))
        only_g = sorted(set(gt_by_id) - set(pred_by_id))
        raise ValueError(f"frame sets differ: only in predictions {only_p[:5]}, only in ground truth {only_g[:5]}")
    return [(pred_by_id[f.frame_id], f) for f in ground_truth]


def _iou_fn(mode: str):
    if mode == "3d":
        return iou_3d
    if mode == "bev":
        return iou_bev
    raise ValueError(f"unknown IoU mode {mode!r}")


def match_frame(
    preds: Sequence[Detection], gts: Sequence[Detection], iou_threshold: float, iou_mode: str = "3d"
) -> list[tuple[float, bool]]:
    """Greedy per-frame matching of same-class detections.

    Predictions are visited by descending score (ties keep input order); each
    takes the unmatched ground truth with the highest IoU, provided it reaches
    ``iou_threshold`` (ties go to the lower ground-truth index).

    Returns:
      ``(score, is_true_positive)`` per prediction, in visiting order.
    """
    fn = _iou_fn(iou_mode)
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(gts)
    out = []
    for i in order:
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            iou = fn(preds[i].box, gt.box)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            taken[best] = True
        out.append((preds[i].score, best >= 0))
    return out


def _class_dets(frame: LabeledFrame, cls: str) -> list[Detection]:
    return [d for d in frame.detections if d.class_name == cls]


def _scored_matches(predictions, ground_truth, cls, iou_threshold, iou_mode):
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    results = []
    n_gt = 0
    for pred, gt in _align(predictions, ground_truth):
        gts = _class_dets(gt, cls)
        n_gt += len(gts)
        results.extend(match_frame(_class_dets(pred, cls), gts, iou_threshold, iou_mode))
    return results, n_gt


def precision_at_iou(
    predictions: Sequence[LabeledFrame],
    ground_truth: Sequence[LabeledFrame],
    iou_threshold: float,
    cls: str,
    iou_mode: str = "3d",
) -> float:
    """TP / (TP + FP) for one class; 1.0 when there are no predictions."""
    results, _ = _scored_matches(predictions, ground_truth, cls, iou_threshold, iou_mode)
    if not results:
        return 1.0
    tp = sum(1 for _, hit in results if hit)
    return tp / len(results)


def threshold_sweep(
    predictions: Sequence[LabeledFrame],
    ground_truth: Sequence[LabeledFrame],
    iou_threshold: float,
    cls: str,
    score_thresholds: Iterable[float],
    iou_mode: str = "3d",
) -> list[dict]:
    """TP/FP counts and precision of the predictions kept at each score threshold."""
    results, _ = _scored_matches(predictions, ground_truth, cls, iou_threshold, iou_mode)
    rows = []
    for t in score_thresholds:
        hits = [hit for score, hit in results if score >= t]
        tp = sum(hits)
        fp = len(hits) - tp
        rows.append({"score_threshold": t, "tp": tp, "fp": fp, "precision": tp / len(hits) if hits else 1.0})
    return rows


def precision_recall(results: Sequence[tuple[float, bool]], n_gt: int):
    """Cumulative TP count, precision and recall over detections by descending score."""
    order = sorted(range(len(results)), key=lambda i: -results[i][0])
    hits = np.array([results[i][1] for i in order], dtype=bool)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return tp, precision, tp / n_gt


def average_precision_once(
    predictions: Sequence[LabeledFrame],
    ground_truth: Sequence[LabeledFrame],
    cls: str,
    iou_threshold: float | None = None,
    iou_mode: str = "3d",
) -> float | None:
    """ONCE-style AP in [0, 100].

    The precision envelope ``max{p(r') : r' >= r}`` is averaged over the 50
    recall levels 0.02, 0.04, ..., 1.00. Returns None when the class has no
    ground truth.
    """
    if iou_threshold is None:
        iou_threshold = ONCE_IOU_THRESHOLDS[cls]
    results, n_gt = _scored_matches(predictions, ground_truth, cls, iou_threshold, iou_mode)
    if n_gt == 0:
        return None
    if not results:
        return 0.0
    tp, precision, _ = precision_recall(results, n_gt)
    # envelope[k] = max precision from detection k onwards
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(1, RECALL_STEPS + 1):
        # recall >= k / 50, compared exactly in integers
        reached = np.nonzero(RECALL_STEPS * tp >= k * n_gt)[0]
        if reached.size:
            total += float(envelope[reached[0]])
    return 100.0 * total / RECALL_STEPS


def mean_ap(aps: Mapping[str, float | None]) -> float | None:
    vals = [v for v in aps.values() if v is not None]
    return sum(vals) / len(vals) if vals else None
