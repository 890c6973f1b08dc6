"""Dataset configuration and file formats.

Point clouds are raw little-endian float32 N x D arrays (KITTI ``.bin`` style).
Labels and proposals are JSON Lines.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .boxes import Box3D
from .crossview import UNKNOWN, Proposal
from .geometry import PointCloud
from .labeling import CLASSES, Detection, LabeledFrame


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    point_range: tuple[float, ...]
    voxel_size: tuple[float, ...]
    feature_dim: int
    class_names: tuple[str, ...] = CLASSES
    features: tuple[str, ...] = field(default=())

    def __post_init__(self):
        pr = tuple(float(v) for v in self.point_range)
        vs = tuple(float(v) for v in self.voxel_size)
        if len(pr) != 6 or any(pr[i] >= pr[i + 3] for i in range(3)):
            raise ValueError(f"point_range must be [xmin, ymin, zmin, xmax, ymax, zmax] with min < max, got {pr}")
        if len(vs) != 3 or any(v <= 0 for v in vs):
            raise ValueError(f"voxel_size must be 3 positive values, got {vs}")
        if self.feature_dim < 3:
            raise ValueError(f"feature_dim must be >= 3, got {self.feature_dim}")
        object.__setattr__(self, "point_range", pr)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "features", tuple(self.features))

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(
            name=d["name"],
            point_range=d["point_range"],
            voxel_size=d["voxel_size"],
            feature_dim=int(d["feature_dim"]),
            class_names=d.get("class_names", CLASSES),
            features=d.get("features", ()),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "point_range": list(self.point_range),
            "voxel_size": list(self.voxel_size),
            "feature_dim": self.feature_dim,
            "class_names": list(self.class_names),
            "features": list(self.features),
        }


DATASETS = {
    "once": DatasetConfig(
        "once", (-75.2, -75.2, -5.0, 75.2, 75.2, 3.0), (0.1, 0.1, 0.2), 4,
        features=("x", "y", "z", "intensity"),
    ),
    "waymo": DatasetConfig(
        "waymo", (-75.2, -75.2, -2.0, 75.2, 75.2, 4.0), (0.1, 0.1, 0.15), 5,
        features=("x", "y", "z", "intensity", "elongation"),
    ),
    "nuscenes": DatasetConfig(
        "nuscenes", (-51.2, -51.2, -5.0, 51.2, 51.2, 3.0), (0.1, 0.1, 0.2), 5,
        class_names=("car", "truck", "construction_vehicle", "bus", "trailer", "barrier",
                     "motorcycle", "bicycle", "pedestrian", "traffic_cone"),
        features=("x", "y", "z", "intensity", "timestamp"),
    ),
    "kitti": DatasetConfig(
        "kitti", (0.0, -40.0, -3.0, 70.4, 40.0, 1.0), (0.05, 0.05, 0.1), 4,
        class_names=("Car", "Pedestrian", "Cyclist"),
        features=("x", "y", "z", "intensity"),
    ),
}


def load_dataset_config(name_or_path) -> DatasetConfig:
    """A preset name (once, waymo, nuscenes, kitti) or a path to a JSON document."""
    key = str(name_or_path).lower()
    if key in DATASETS:
        return DATASETS[key]
    with open(name_or_path) as f:
        return DatasetConfig.from_dict(json.load(f))


def read_point_cloud(path, config: DatasetConfig | int) -> PointCloud:
    """Read a float32 N x D cloud; D comes from the config (or is given directly)."""
    dim = config if isinstance(config, int) else config.feature_dim
    data = Path(path).read_bytes()
    if len(data) % (4 * dim):
        raise ValueError(
            f"{path}: {len(data)} bytes is not a whole number of {dim}-float points "
            f"(expected a multiple of {4 * dim}, {len(data) % (4 * dim)} bytes left over)"
        )
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, dim).astype(np.float32)
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{path}: point cloud contains non-finite values")
    return PointCloud(pts)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_point_cloud(cloud: PointCloud, path, config: DatasetConfig | int) -> None:
    dim = config if isinstance(config, int) else config.feature_dim
    if cloud.feature_dim != dim:
        raise ValueError(f"cloud has {cloud.feature_dim} features, config expects {dim}")
    pts = np.asarray(cloud.points)
    if not np.all(np.isfinite(pts)):
        raise ValueError("refusing to write a cloud with non-finite values")
    atomic_write_bytes(path, pts.astype("<f4").tobytes())


def crop_to_range(cloud: PointCloud, config: DatasetConfig) -> PointCloud:
    """Keep points inside the closed axis-aligned point range."""
    lo = np.array(config.point_range[:3])
    hi = np.array(config.point_range[3:])
    xyz = cloud.xyz
    mask = np.all((xyz >= lo) & (xyz <= hi), axis=1)
    return PointCloud(cloud.points[mask])


# --- JSON Lines ------------------------------------------------------------


def detection_to_dict(det: Detection) -> dict:
    return {"box": det.box.to_list(), "class": det.class_name, "score": det.score, "source": det.source}


def detection_from_dict(d: dict) -> Detection:
    return Detection(
        box=Box3D.from_array(d["box"]),
        class_name=str(d["class"]),
        score=float(d.get("score", 1.0)),
        source=str(d.get("source", "")),
    )


def frame_to_dict(frame: LabeledFrame) -> dict:
    out = {"frame_id": frame.frame_id, "detections": [detection_to_dict(d) for d in frame.detections]}
    if frame.cloud_ref is not None:
        out["cloud_ref"] = frame.cloud_ref
    return out


def frame_from_dict(d: dict) -> LabeledFrame:
    return LabeledFrame(
        frame_id=str(d["frame_id"]),
        detections=tuple(detection_from_dict(x) for x in d.get("detections", [])),
        cloud_ref=d.get("cloud_ref"),
    )


def _iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None


def read_labels(path) -> list[LabeledFrame]:
    frames = []
    for lineno, obj in _iter_jsonl(path):
        try:
            frames.append(frame_from_dict(obj))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: bad label record: {e}") from None
    return frames


def dumps_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def labels_to_jsonl(frames: Iterable[LabeledFrame]) -> str:
    return "".join(dumps_line(frame_to_dict(f)) + "\n" for f in frames)


def write_labels(frames: Iterable[LabeledFrame], path) -> None:
    atomic_write_bytes(path, labels_to_jsonl(frames).encode())


def proposal_to_dict(p: Proposal) -> dict:
    return {
        "box": p.box.to_list(),
        "feature": [float(v) for v in p.feature],
        "objectness": float(p.objectness),
        "label": p.label,
    }


def proposal_from_dict(d: dict) -> Proposal:
    return Proposal(
        box=Box3D.from_array(d["box"]),
        feature=np.asarray(d["feature"], dtype=np.float64),
        objectness=float(d.get("objectness", 0.0)),
        label=str(d.get("label", UNKNOWN)),
    )


def read_proposals(path) -> list[Proposal]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            out.append(proposal_from_dict(obj))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: bad proposal record: {e}") from None
    return out


def write_proposals(proposals: Iterable[Proposal], path) -> None:
    atomic_write_bytes(path, "".join(dumps_line(proposal_to_dict(p)) + "\n" for p in proposals).encode())


def read_inclinations(path) -> np.ndarray:
    """Beam inclinations in radians: a JSON array or whitespace/newline separated numbers."""
    text = Path(path).read_text().strip()
    if text.startswith("["):
        return np.asarray(json.loads(text), dtype=np.float64)
    return np.loadtxt(path, dtype=np.float64, ndmin=1)
