"""Two-view augmentation and cross-view proposal correspondence.

Proposals from two differently augmented copies of a frame are mapped back to
the un-augmented frame, the top-M by objectness are kept per view, and pairs
whose box centers lie closer than ``tau`` are matched one-to-one in order of
increasing distance. Matched features drive the consistency loss, and matched
``Unknown`` proposals are promoted to foreground.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .boxes import Box3D, boxes_to_array, normalize_heading

UNKNOWN = "Unknown"
PROMOTED = "ForegroundUnknown"
PROPOSAL_LABELS = ("Vehicle", "Pedestrian", "Cyclist", UNKNOWN, PROMOTED)

ROTATION_RANGE = (-math.pi, math.pi)
SCALE_RANGE = (0.7, 1.2)


class EmptyMatchWarning(UserWarning):
    """Raised as a warning when a consistency loss is computed over zero matches."""


@dataclass(frozen=True)
class AugmentationSpec:
    rotation: float = 0.0
    scale: float = 1.0
    flip_x: bool = False
    flip_y: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def sample(cls, rng: np.random.Generator, seed: int = 0) -> "AugmentationSpec":
        """Draw rotation in [-pi, pi], scale in [0.7, 1.2] and each flip with probability 1/2."""
        rotation = float(rng.uniform(*ROTATION_RANGE))
        scale = float(rng.uniform(*SCALE_RANGE))
        flip_x, flip_y = (bool(b) for b in rng.random(2) < 0.5)
        return cls(rotation, scale, flip_x, flip_y, seed)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        return cls(
            rotation=float(d.get("rotation", 0.0)),
            scale=float(d.get("scale", 1.0)),
            flip_x=bool(d.get("flip_x", False)),
            flip_y=bool(d.get("flip_y", False)),
            seed=int(d.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation,
            "scale": self.scale,
            "flip_x": self.flip_x,
            "flip_y": self.flip_y,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class Proposal:
    box: Box3D
    feature: np.ndarray
    objectness: float = 0.0
    label: str = UNKNOWN

    def __post_init__(self):
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64).reshape(-1))
        if self.label not in PROPOSAL_LABELS:
            raise ValueError(f"unknown proposal label {self.label!r}")


@dataclass(frozen=True)
class MatchConfig:
    top_m: int = 256
    tau: float = 0.3

    def __post_init__(self):
        if self.top_m < 1:
            raise ValueError(f"top_m must be >= 1, got {self.top_m}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class MatchSet:
    """One-to-one pairs ``(index_in_view1, index_in_view2, center_distance)``."""

    pairs: tuple[tuple[int, int, float], ...] = ()

    @property
    def K(self) -> int:
        return len(self.pairs)

    def index_pairs(self) -> set[tuple[int, int]]:
        return {(i, j) for i, j, _ in self.pairs}

    def transposed(self) -> "MatchSet":
        return MatchSet(tuple((j, i, d) for i, j, d in self.pairs))


def _rotate_xy(xy: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def _forward_points(xyz: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    out = np.array(xyz, dtype=np.float64, copy=True)
    out[..., :2] = _rotate_xy(out[..., :2], spec.rotation)
    out *= spec.scale
    if spec.flip_x:
        out[..., 1] = -out[..., 1]
    if spec.flip_y:
        out[..., 0] = -out[..., 0]
    return out


def _inverse_points(xyz: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    out = np.array(xyz, dtype=np.float64, copy=True)
    if spec.flip_y:
        out[..., 0] = -out[..., 0]
    if spec.flip_x:
        out[..., 1] = -out[..., 1]
    out /= spec.scale
    out[..., :2] = _rotate_xy(out[..., :2], -spec.rotation)
    return out


def _forward_heading(h: float, spec: AugmentationSpec) -> float:
    h = h + spec.rotation
    if spec.flip_x:
        h = -h
    if spec.flip_y:
        h = math.pi - h
    return normalize_heading(h)


def _inverse_heading(h: float, spec: AugmentationSpec) -> float:
    if spec.flip_y:
        h = math.pi - h
    if spec.flip_x:
        h = -h
    return normalize_heading(h - spec.rotation)


def _transform_boxes(boxes, spec, points_fn, heading_fn, size_factor):
    if not boxes:
        return []
    centers = points_fn(boxes_to_array(boxes)[:, :3], spec)
    return [
        Box3D(*c, b.l * size_factor, b.w * size_factor, b.h * size_factor, heading_fn(b.heading, spec))
        for b, c in zip(boxes, centers)
    ]


def apply_augmentation(points, boxes: Sequence[Box3D], spec: AugmentationSpec):
    """Rotate about z, scale uniformly, then flip; applied to points and boxes alike.

    ``flip_x`` mirrors across the x axis (y -> -y, heading -> -heading) and
    ``flip_y`` across the y axis (x -> -x, heading -> pi - heading). Extra point
    columns are passed through.

    Returns:
      ``(points, boxes)`` in the augmented frame.
    """
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    out[:, :3] = _forward_points(pts[:, :3], spec)
    return out, _transform_boxes(list(boxes), spec, _forward_points, _forward_heading, spec.scale)


def inverse_transform_boxes(boxes: Sequence[Box3D], spec: AugmentationSpec) -> list[Box3D]:
    return _transform_boxes(list(boxes), spec, _inverse_points, _inverse_heading, 1.0 / spec.scale)


def inverse_transform_points(points, spec: AugmentationSpec) -> np.ndarray:
    pts = np.array(points, dtype=np.float64, copy=True)
    pts[:, :3] = _inverse_points(pts[:, :3], spec)
    return pts


def select_top_m(proposals: Sequence[Proposal], m: int) -> list[int]:
    """Indices of the ``min(m, N)`` highest-objectness proposals, best first; ties keep lower index."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    scores = np.array([p.objectness for p in proposals], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:m]]


def _feature_dim(proposals: Sequence[Proposal]) -> int | None:
    dims = {p.feature.shape[0] for p in proposals}
    if len(dims) > 1:
        raise ValueError(f"proposal features have mixed widths {sorted(dims)}")
    return dims.pop() if dims else None


def greedy_pairs(centers1: np.ndarray, centers2: np.ndarray, tau: float):
    """One-to-one pairs with center distance < tau, taken by ascending (distance, i, j)."""
    if len(centers1) == 0 or len(centers2) == 0:
        return []
    diff = centers1[:, None, :] - centers2[None, :, :]
    dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2)
    ii, jj = np.nonzero(dist < tau)
    dd = dist[ii, jj]
    order = np.lexsort((jj, ii, dd))
    used1, used2 = set(), set()
    pairs = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used1 or j in used2:
            continue
        used1.add(i)
        used2.add(j)
        pairs.append((i, j, float(dd[k])))
    return pairs


def match_cross_view(
    view1: Sequence[Proposal],
    view2: Sequence[Proposal],
    spec1: AugmentationSpec,
    spec2: AugmentationSpec,
    cfg: MatchConfig = MatchConfig(),
) -> MatchSet:
    """Match proposals across two augmented views by box-center distance in the common frame."""
    d1, d2 = _feature_dim(view1), _feature_dim(view2)
    if d1 is not None and d2 is not None and d1 != d2:
        raise ValueError(f"feature widths differ between views: {d1} vs {d2}")

    sel1 = select_top_m(view1, cfg.top_m) if view1 else []
    sel2 = select_top_m(view2, cfg.top_m) if view2 else []
    boxes1 = inverse_transform_boxes([view1[i].box for i in sel1], spec1)
    boxes2 = inverse_transform_boxes([view2[i].box for i in sel2], spec2)
    c1 = boxes_to_array(boxes1)[:, :3]
    c2 = boxes_to_array(boxes2)[:, :3]
    local = greedy_pairs(c1, c2, cfg.tau)
    return MatchSet(tuple((sel1[i], sel2[j], d) for i, j, d in local))


def consistency_loss(
    matches: MatchSet,
    view1: Sequence[Proposal],
    view2: Sequence[Proposal],
    batch_size: int = 1,
    reduction: str = "mean",
) -> float:
    """Squared feature difference of matched pairs, summed over pairs and divided by B * K.

    ``reduction`` chooses how each pair's squared difference collapses over the
    feature dimensions: ``"mean"`` (default) or ``"sum"``. With no matches the
    loss is 0.0 and an :class:`EmptyMatchWarning` is issued.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if matches.K == 0:
        warnings.warn("consistency loss over zero matched pairs", EmptyMatchWarning, stacklevel=2)
        return 0.0
    f1 = np.stack([view1[i].feature for i, _, _ in matches.pairs])
    f2 = np.stack([view2[j].feature for _, j, _ in matches.pairs])
    sq = (f1 - f2) ** 2
    per_pair = sq.mean(axis=1) if reduction == "mean" else sq.sum(axis=1)
    return float(per_pair.sum() / (batch_size * matches.K))


def promote_unknowns(
    view1: Sequence[Proposal], view2: Sequence[Proposal], matches: MatchSet
) -> tuple[list[Proposal], list[Proposal]]:
    """Mark matched ``Unknown`` proposals as foreground; everything else is left alone."""
    out1, out2 = list(view1), list(view2)
    for i, j, _ in matches.pairs:
        if out1[i].label == UNKNOWN:
            out1[i] = replace(out1[i], label=PROMOTED)
        if out2[j].label == UNKNOWN:
            out2[j] = replace(out2[j], label=PROMOTED)
    return out1, out2
