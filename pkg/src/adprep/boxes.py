"""7-DoF box geometry: local frames, containment, object re-scaling and rotated IoU.

Boxes are gravity aligned: ``(cx, cy, cz, l, w, h, heading)`` with the length axis
at angle ``heading`` from +x, counter-clockwise. Points are transformed into the
box frame as row vectors, ``local = (p - c) @ R`` with

    R = [[cos h, -sin h, 0],
         [sin h,  cos h, 0],
         [0,      0,     1]]

and back with ``p = local @ R.T + c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import PointCloud


def normalize_heading(heading: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    h = math.fmod(heading + math.pi, 2.0 * math.pi)
    if h < 0:
        h += 2.0 * math.pi
    h -= math.pi
    # fmod can round up to exactly +pi for inputs a hair below an odd multiple of pi
    return -math.pi if h >= math.pi else h


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    heading: float = 0.0

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "l", "w", "h", "heading"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"box field {name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got ({self.l}, {self.w}, {self.h})")
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        if len(values) != 7:
            raise ValueError(f"a box needs 7 values, got {len(values)}")
        return cls(*values)

    def to_list(self) -> list[float]:
        return [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.heading]

    def to_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def with_center(self, center) -> "Box3D":
        return Box3D(center[0], center[1], center[2], self.l, self.w, self.h, self.heading)


@dataclass(frozen=True)
class RotationZ:
    cos_h: float
    sin_h: float

    @classmethod
    def from_heading(cls, heading: float) -> "RotationZ":
        return cls(math.cos(heading), math.sin(heading))

    @property
    def matrix(self) -> np.ndarray:
        c, s = self.cos_h, self.sin_h
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def boxes_to_array(boxes: Iterable[Box3D]) -> np.ndarray:
    arr = np.array([b.to_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 7)


def array_to_boxes(arr) -> list[Box3D]:
    return [Box3D(*row) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 7)]


def _split(points):
    pts = np.asarray(points, dtype=np.float64)
    return pts[..., :3], pts[..., 3:]


def to_local(points, box: Box3D) -> np.ndarray:
    """Express points (..., >=3) in the box frame; extra columns pass through unchanged."""
    xyz, extra = _split(points)
    local = (xyz - box.center) @ RotationZ.from_heading(box.heading).matrix
    return np.concatenate([local, extra], axis=-1)


def from_local(points, box: Box3D) -> np.ndarray:
    """Inverse of :func:`to_local`."""
    local, extra = _split(points)
    xyz = local @ RotationZ.from_heading(box.heading).matrix.T + box.center
    return np.concatenate([xyz, extra], axis=-1)


def contains(box: Box3D, points) -> np.ndarray:
    """Boolean mask of points inside the closed box."""
    local = to_local(points, box)[..., :3]
    half = box.size / 2.0
    return np.all(np.abs(local) <= half, axis=-1)


def rescale_object(box: Box3D, points, alpha: float) -> tuple[Box3D, np.ndarray]:
    """Scale a box and the points inside it by ``alpha`` about the box center.

    ``points`` should be exactly the in-box points (select them with
    :func:`contains`). Center and heading are kept; extra point features are
    preserved.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    local = to_local(pts, box)
    local[..., :3] *= alpha
    out = from_local(local, box)
    scaled = Box3D(box.cx, box.cy, box.cz, alpha * box.l, alpha * box.w, alpha * box.h, box.heading)
    return scaled, out


def rescale_in_cloud(
    cloud: PointCloud, box: Box3D, alpha: float, remove_occluded: bool = False
) -> tuple[Box3D, PointCloud]:
    """Rescale the object ``box`` inside ``cloud``, returning the new box and full cloud.

    With ``remove_occluded`` background points that end up inside the enlarged
    box are deleted.
    """
    mask = contains(box, cloud.xyz)
    scaled, moved = rescale_object(box, cloud.points[mask], alpha)
    pts = np.array(cloud.points, dtype=np.float64, copy=True)
    pts[mask] = moved
    if remove_occluded and alpha > 1:
        inside_new = contains(scaled, pts[:, :3]) & ~mask
        pts = pts[~inside_new]
    return scaled, PointCloud(pts)


def bev_corners(box: Box3D) -> np.ndarray:
    """Footprint corners, shape (4, 2), counter-clockwise."""
    hl, hw = box.l / 2.0, box.w / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, s], [-s, c]])
    return local @ rot + np.array([box.cx, box.cy])


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of a convex polygon by a counter-clockwise convex polygon."""
    output = [tuple(map(float, p)) for p in subject]
    clip = [tuple(map(float, p)) for p in clip]
    for k in range(len(clip)):
        if not output:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    poly = clip_convex(bev_corners(a), bev_corners(b))
    return max(polygon_area(poly), 0.0)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Intersection over union of the rotated footprints."""
    inter = bev_intersection_area(a, b)
    if inter <= 0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(inter / union, 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: footprint intersection times vertical overlap, over the volume union."""
    zo = min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2)
    if zo <= 0:
        return 0.0
    inter_area = bev_intersection_area(a, b)
    if inter_area <= 0:
        return 0.0
    inter = inter_area * zo
    union = a.volume + b.volume - inter
    return min(inter / union, 1.0)


def iou_matrix(boxes_a: Sequence[Box3D], boxes_b: Sequence[Box3D], mode: str = "3d") -> np.ndarray:
    fn = iou_3d if mode == "3d" else iou_bev
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out
