"""Spherical projection between point clouds and range images, and beam re-sampling.

Axis convention: azimuth is measured from the +y axis towards +x, i.e.
``theta = atan2(x, y)``, which agrees with ``arctan(x / y)`` on the +y half-plane
and extends it to all four quadrants. Inclination is the elevation above the x-y
plane. ``from_spherical`` is the exact inverse of ``to_spherical`` under this
convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi

RANGE_IMAGE_MAGIC = b"PCRI"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class PointCloud:
    """An N x D array of lidar returns: x, y, z followed by D - 3 extra features."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise ValueError(f"point array must be N x D with D >= 3, got shape {pts.shape}")
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls, feature_dim: int = 3, dtype=np.float32) -> "PointCloud":
        return cls(np.zeros((0, feature_dim), dtype=dtype))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def extras(self) -> np.ndarray:
        return self.points[:, 3:]

    @property
    def feature_dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RangeImage:
    """An n_beams x n_cols grid of ranges (0.0 means no return) plus per-cell extras."""

    ranges: np.ndarray
    beam_inclinations: np.ndarray
    extras: np.ndarray = field(default=None)

    def __post_init__(self):
        ranges = np.asarray(self.ranges, dtype=np.float64)
        incl = np.asarray(self.beam_inclinations, dtype=np.float64)
        if ranges.ndim != 2:
            raise ValueError(f"ranges must be 2-D, got shape {ranges.shape}")
        if incl.shape != (ranges.shape[0],):
            raise ValueError(
                f"expected {ranges.shape[0]} beam inclinations, got {incl.shape[0] if incl.ndim else 0}"
            )
        extras = self.extras
        if extras is None:
            extras = np.zeros(ranges.shape + (0,), dtype=np.float64)
        extras = np.asarray(extras, dtype=np.float64)
        if extras.ndim != 3 or extras.shape[:2] != ranges.shape:
            raise ValueError(f"extras grid shape {extras.shape} does not match ranges {ranges.shape}")
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "beam_inclinations", incl)
        object.__setattr__(self, "extras", extras)

    @property
    def n_beams(self) -> int:
        return self.ranges.shape[0]

    @property
    def n_cols(self) -> int:
        return self.ranges.shape[1]

    @property
    def extras_dim(self) -> int:
        return self.extras.shape[2]


def _check_inclinations(incl: np.ndarray) -> None:
    if incl.ndim != 1 or incl.size == 0:
        raise ValueError("beam_inclinations must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(incl)):
        raise ValueError("beam_inclinations must be finite")
    if np.any(np.diff(incl) <= 0):
        raise ValueError("beam_inclinations must be strictly ascending")
    if incl[0] < -np.pi / 2 or incl[-1] > np.pi / 2:
        raise ValueError("beam_inclinations must lie in [-pi/2, pi/2]")


def to_spherical(xyz) -> np.ndarray:
    """Convert Cartesian coordinates to (r, theta, phi).

    Args:
      xyz: array of shape (..., 3).

    Returns:
      Array of shape (..., 3) holding range, azimuth in [-pi, pi) and
      inclination in [-pi/2, pi/2]. The origin maps to (0, 0, 0).
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    horiz = np.hypot(x, y)
    r = np.sqrt(x * x + y * y + z * z)
    theta = np.arctan2(x, y)
    theta = np.where(theta >= np.pi, theta - TWO_PI, theta)
    # atan2(z, horiz) equals arcsin(z / r) but keeps full precision near the poles.
    phi = np.arctan2(z, horiz)
    theta = np.where(horiz > 0, theta, 0.0)
    return np.stack([r, theta, phi], axis=-1)


def from_spherical(sph) -> np.ndarray:
    """Inverse of :func:`to_spherical`; ``sph`` has shape (..., 3) as (r, theta, phi)."""
    sph = np.asarray(sph, dtype=np.float64)
    r, theta, phi = sph[..., 0], sph[..., 1], sph[..., 2]
    rc = r * np.cos(phi)
    return np.stack([rc * np.sin(theta), rc * np.cos(theta), r * np.sin(phi)], axis=-1)


def column_centers(n_cols: int) -> np.ndarray:
    """Azimuth at the center of each range-image column."""
    return (np.arange(n_cols, dtype=np.float64) + 0.5) / n_cols * TWO_PI - np.pi


def nearest_beam(phi, beam_inclinations) -> np.ndarray:
    """Index of the nearest beam inclination for each phi; ties go to the lower beam."""
    incl = np.asarray(beam_inclinations, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    hi = np.clip(np.searchsorted(incl, phi, side="left"), 0, incl.size - 1)
    lo = np.clip(hi - 1, 0, incl.size - 1)
    pick_lo = np.abs(phi - incl[lo]) <= np.abs(incl[hi] - phi)
    return np.where(pick_lo, lo, hi)


def cloud_to_range_image(cloud: PointCloud, beam_inclinations, n_cols: int) -> RangeImage:
    """Project a cloud onto a range image.

    Each point lands in the row of the nearest beam inclination and the column
    ``floor((theta + pi) / 2pi * n_cols)``. When several points share a cell the
    nearest one is kept (ties keep the earlier point). Points at the origin carry
    no return and are dropped.
    """
    if n_cols < 1:
        raise ValueError(f"n_cols must be >= 1, got {n_cols}")
    incl = np.asarray(beam_inclinations, dtype=np.float64)
    _check_inclinations(incl)
    n_extra = cloud.feature_dim - 3
    ranges = np.zeros((incl.size, n_cols), dtype=np.float64)
    extras = np.zeros((incl.size, n_cols, n_extra), dtype=np.float64)
    if len(cloud) == 0:
        return RangeImage(ranges, incl, extras)

    sph = to_spherical(cloud.xyz)
    r = sph[:, 0]
    keep = r > 0
    sph, r = sph[keep], r[keep]
    pts_extra = np.asarray(cloud.extras, dtype=np.float64)[keep]

    rows = nearest_beam(sph[:, 2], incl)
    cols = np.floor((sph[:, 1] + np.pi) / TWO_PI * n_cols).astype(np.int64)
    cols = np.clip(cols, 0, n_cols - 1)
    flat = rows * n_cols + cols

    order = np.lexsort((r, flat))
    _, first = np.unique(flat[order], return_index=True)
    winners = order[first]
    ranges[rows[winners], cols[winners]] = r[winners]
    extras[rows[winners], cols[winners]] = pts_extra[winners]
    return RangeImage(ranges, incl, extras)


def range_image_to_cloud(img: RangeImage) -> PointCloud:
    """Back-project every cell with a return, in row-major order, at its beam and column center."""
    rows, cols = np.nonzero(img.ranges > 0)
    sph = np.stack(
        [img.ranges[rows, cols], column_centers(img.n_cols)[cols], img.beam_inclinations[rows]],
        axis=-1,
    )
    xyz = from_spherical(sph).reshape(-1, 3)
    return PointCloud(np.concatenate([xyz, img.extras[rows, cols]], axis=1))


def subsample_rows(n_beams: int, target_beams: int) -> np.ndarray:
    """Row indices ``round(i * (n - 1) / (t - 1))`` with halves rounded up; endpoints kept."""
    if target_beams == 1:
        return np.zeros(1, dtype=np.int64)
    i = np.arange(target_beams, dtype=np.int64)
    # integer arithmetic keeps the rounding exact
    return (2 * i * (n_beams - 1) + (target_beams - 1)) // (2 * (target_beams - 1))


def resample_beams(img: RangeImage, target_beams: int) -> RangeImage:
    """Change the number of beams (rows) of a range image.

    Downsampling keeps a uniformly spaced subset of rows verbatim. Upsampling
    places target row k at source position ``k * (n - 1) / (t - 1)`` and linearly
    interpolates inclinations, ranges and extras; a cell is filled only when both
    neighbouring source cells hold a return.
    """
    if target_beams < 1:
        raise ValueError(f"target_beams must be >= 1, got {target_beams}")
    n = img.n_beams
    if target_beams == n:
        return RangeImage(img.ranges.copy(), img.beam_inclinations.copy(), img.extras.copy())
    if target_beams < n:
        idx = subsample_rows(n, target_beams)
        return RangeImage(img.ranges[idx], img.beam_inclinations[idx], img.extras[idx])
    if n < 2:
        raise ValueError("cannot upsample a single-beam range image")

    k = np.arange(target_beams, dtype=np.int64)
    num = k * (n - 1)
    lo = num // (target_beams - 1)
    frac = (num % (target_beams - 1)) / (target_beams - 1)
    hi = np.minimum(lo + 1, n - 1)

    incl = img.beam_inclinations
    new_incl = incl[lo] + frac * (incl[hi] - incl[lo])
    new_incl[frac == 0] = incl[lo[frac == 0]]

    r_lo, r_hi = img.ranges[lo], img.ranges[hi]
    w = frac[:, None]
    valid = (r_lo > 0) & (r_hi > 0)
    ranges = np.where(valid, r_lo + w * (r_hi - r_lo), 0.0)
    e_lo, e_hi = img.extras[lo], img.extras[hi]
    extras = np.where(valid[..., None], e_lo + w[..., None] * (e_hi - e_lo), 0.0)

    exact = frac == 0
    ranges[exact] = img.ranges[lo[exact]]
    extras[exact] = img.extras[lo[exact]]
    return RangeImage(ranges, new_incl, extras)


def resample_cloud(cloud: PointCloud, beam_inclinations, n_cols: int, target_beams: int) -> PointCloud:
    """Cloud -> range image -> beam re-sampling -> cloud."""
    img = cloud_to_range_image(cloud, beam_inclinations, n_cols)
    return range_image_to_cloud(resample_beams(img, target_beams))


def uniform_inclinations(n_beams: int, fov_down: float, fov_up: float) -> np.ndarray:
    """Evenly spaced beam inclinations (radians) from ``fov_down`` to ``fov_up`` inclusive."""
    if n_beams == 1:
        return np.array([0.5 * (fov_down + fov_up)])
    return np.linspace(fov_down, fov_up, n_beams)


def write_range_image(img: RangeImage, path) -> None:
    """Serialize as: "PCRI", u32 n_beams, u32 n_cols, u32 extras_dim, then float32 payloads (LE)."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(RANGE_IMAGE_MAGIC, img.n_beams, img.n_cols, img.extras_dim))
        f.write(img.beam_inclinations.astype("<f4").tobytes())
        f.write(img.ranges.astype("<f4").tobytes())
        f.write(img.extras.astype("<f4").tobytes())


def read_range_image(path) -> RangeImage:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("range image file is truncated")
    magic, n, m, e = _HEADER.unpack_from(data)
    if magic != RANGE_IMAGE_MAGIC:
        raise ValueError(f"bad range image magic {magic!r}")
    expected = _HEADER.size + 4 * (n + n * m + n * m * e)
    if len(data) != expected:
        raise ValueError(f"range image size mismatch: expected {expected} bytes, got {len(data)}")
    payload = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    incl = payload[:n]
    ranges = payload[n : n + n * m].reshape(n, m)
    extras = payload[n + n * m :].reshape(n, m, e)
    return RangeImage(ranges, incl, extras)
