"""Deterministic per-frame processing pipeline.

Every frame draws its randomness from a generator seeded by a stable 64-bit
hash of ``(global_seed, frame_id)``, so results do not depend on frame order or
on how many worker processes share the run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .boxes import rescale_in_cloud
from .crossview import AugmentationSpec, apply_augmentation
from .geometry import PointCloud, resample_cloud, uniform_inclinations
from .io import (
    DatasetConfig,
    atomic_write_bytes,
    crop_to_range,
    dumps_line,
    frame_to_dict,
    read_point_cloud,
    write_point_cloud,
)
from .labeling import (
    DEFAULT_THRESHOLDS,
    ONCE_CLASS_MAP,
    LabeledFrame,
    apply_class_map,
    filter_by_threshold,
)

log = logging.getLogger(__name__)

_SAFE_ID = re.compile(r"^[A-Za-z0-9_\-][A-Za-z0-9_.\-]*$")


class SeedStream:
    """Per-frame random generators derived from a global seed."""

    def __init__(self, global_seed: int):
        self.global_seed = int(global_seed)

    def seed_for(self, frame_id: str) -> int:
        h = hashlib.blake2b(f"{self.global_seed}\x00{frame_id}".encode(), digest_size=8)
        return int.from_bytes(h.digest(), "little")

    def rng(self, frame_id: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_for(frame_id))


@dataclass
class FrameState:
    cloud: PointCloud
    frame: LabeledFrame
    views: list = field(default_factory=list)
    alphas: list = field(default_factory=list)


# --- stages ------------------------------------------------------------------


@dataclass(frozen=True)
class BeamResample:
    target_beams: int
    inclinations: tuple[float, ...]
    n_cols: int = 1800

    def __post_init__(self):
        if self.target_beams < 1:
            raise ValueError(f"target_beams must be >= 1, got {self.target_beams}")
        if self.n_cols < 1:
            raise ValueError(f"n_cols must be >= 1, got {self.n_cols}")

    def __call__(self, state: FrameState, rng: np.random.Generator) -> None:
        state.cloud = resample_cloud(state.cloud, self.inclinations, self.n_cols, self.target_beams)


@dataclass(frozen=True)
class ObjectRescale:
    alpha_range: tuple[float, float] = (0.9, 1.1)
    remove_occluded: bool = False

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not (lo > 0 and lo <= hi):
            raise ValueError(f"alpha_range must satisfy 0 < min <= max, got {self.alpha_range}")

    def __call__(self, state: FrameState, rng: np.random.Generator) -> None:
        # boxes are processed in label order; later boxes see earlier edits
        lo, hi = self.alpha_range
        cloud, dets = state.cloud, []
        for det in state.frame.detections:
            alpha = float(rng.uniform(lo, hi))
            box, cloud = rescale_in_cloud(cloud, det.box, alpha, self.remove_occluded)
            dets.append(replace(det, box=box))
            state.alphas.append((det.class_name, alpha))
        state.cloud = cloud
        state.frame = state.frame.with_detections(dets)


@dataclass(frozen=True)
class ClassMapStage:
    mapping: dict

    def __call__(self, state: FrameState, rng: np.random.Generator) -> None:
        state.frame = apply_class_map(state.frame, self.mapping)


@dataclass(frozen=True)
class ThresholdStage:
    thresholds: dict

    def __post_init__(self):
        for cls, t in self.thresholds.items():
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold for {cls} must be in [0, 1], got {t}")

    def __call__(self, state: FrameState, rng: np.random.Generator) -> None:
        state.frame = filter_by_threshold(state.frame, self.thresholds)


@dataclass(frozen=True)
class TwoViewAugment:
    """Produce two augmented views; specs are drawn per frame unless given."""

    specs: tuple[AugmentationSpec, AugmentationSpec] | None = None

    def __call__(self, state: FrameState, rng: np.random.Generator) -> None:
        specs = self.specs
        if specs is None:
            specs = tuple(AugmentationSpec.sample(rng) for _ in range(2))
        boxes = [d.box for d in state.frame.detections]
        state.views = []
        for spec in specs:
            pts, aug_boxes = apply_augmentation(state.cloud.points, boxes, spec)
            state.views.append((spec, PointCloud(pts), aug_boxes))


@dataclass(frozen=True)
class CropToRange:
    config: DatasetConfig

    def __call__(self, state: FrameState, rng: np.random.Generator) -> None:
        state.cloud = crop_to_range(state.cloud, self.config)


def stage_from_dict(d: dict, dataset: DatasetConfig | None = None):
    kind = d.get("type")
    if kind == "beam_resample":
        if "inclinations" in d:
            incl = tuple(float(v) for v in d["inclinations"])
        else:
            down, up = d["fov_deg"]
            incl = tuple(uniform_inclinations(int(d["source_beams"]), math.radians(down), math.radians(up)))
        return BeamResample(int(d["target_beams"]), incl, int(d.get("n_cols", 1800)))
    if kind == "object_rescale":
        lo, hi = d.get("alpha_range", (0.9, 1.1))
        return ObjectRescale((float(lo), float(hi)), bool(d.get("remove_occluded", False)))
    if kind == "class_map":
        mapping = d.get("mapping", "once")
        return ClassMapStage(dict(ONCE_CLASS_MAP) if mapping == "once" else dict(mapping))
    if kind == "threshold_policy":
        return ThresholdStage({k: float(v) for k, v in d.get("thresholds", DEFAULT_THRESHOLDS).items()})
    if kind == "two_view_augment":
        specs = d.get("specs")
        if specs is not None:
            if len(specs) != 2:
                raise ValueError("two_view_augment needs exactly two specs")
            specs = tuple(AugmentationSpec.from_dict(s) for s in specs)
        return TwoViewAugment(specs)
    if kind == "crop_to_range":
        if dataset is None:
            raise ValueError("crop_to_range needs a dataset config")
        return CropToRange(dataset)
    raise ValueError(f"unknown stage type {kind!r}")


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple = ()
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict, dataset: DatasetConfig | None = None) -> "PipelineConfig":
        return cls(tuple(stage_from_dict(s, dataset) for s in d.get("stages", [])), int(d.get("seed", 0)))


@dataclass(frozen=True)
class ProcessedFrame:
    frame_id: str
    cloud: PointCloud
    frame: LabeledFrame
    views: tuple = ()
    alphas: tuple = ()


@dataclass(frozen=True)
class FrameError:
    frame_id: str
    stage: str
    error: str

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "stage": self.stage, "error": self.error}


def process_frame(cloud: PointCloud, frame: LabeledFrame, config: PipelineConfig):
    """Run every stage on one frame; a failing stage yields a :class:`FrameError`."""
    rng = SeedStream(config.seed).rng(frame.frame_id)
    state = FrameState(cloud, frame)
    for stage in config.stages:
        try:
            stage(state, rng)
        except Exception as e:  # noqa: BLE001 - any stage failure is recorded per frame
            return FrameError(frame.frame_id, type(stage).__name__, f"{type(e).__name__}: {e}")
    return ProcessedFrame(frame.frame_id, state.cloud, state.frame, tuple(state.views), tuple(state.alphas))


def run_pipeline(frames: Iterable[tuple[PointCloud, LabeledFrame]], config: PipelineConfig) -> Iterator:
    """Lazily process ``(cloud, labels)`` pairs, yielding results or error records in input order."""
    for cloud, frame in frames:
        yield process_frame(cloud, frame, config)


# --- on-disk runs ------------------------------------------------------------


def frame_document(result: ProcessedFrame) -> dict:
    return {
        "frame": frame_to_dict(result.frame),
        "num_points": len(result.cloud),
        "feature_dim": result.cloud.feature_dim,
        "views": [
            {"spec": spec.to_dict(), "boxes": [b.to_list() for b in boxes], "num_points": len(cloud)}
            for spec, cloud, boxes in result.views
        ],
    }


def write_result(result, out_dir: Path) -> dict:
    """Write one frame's outputs and return its summary entry."""
    if isinstance(result, FrameError):
        atomic_write_bytes(out_dir / f"{result.frame_id}.error.json", (dumps_line(result.to_dict()) + "\n").encode())
        return {"frame_id": result.frame_id, "ok": False}
    fid = result.frame_id
    dim = result.cloud.feature_dim
    write_point_cloud(result.cloud, out_dir / f"{fid}.bin", dim)
    for k, (_, cloud, _) in enumerate(result.views):
        write_point_cloud(cloud, out_dir / f"{fid}.view{k}.bin", cloud.feature_dim)
    atomic_write_bytes(out_dir / f"{fid}.json", (dumps_line(frame_document(result)) + "\n").encode())
    return {"frame_id": fid, "ok": True}


@dataclass(frozen=True)
class FrameJob:
    frame: LabeledFrame
    cloud_path: str
    feature_dim: int


def _run_job(job: FrameJob, config: PipelineConfig, out_dir: str) -> dict:
    fid = job.frame.frame_id
    if not _SAFE_ID.match(fid):
        return {"frame_id": fid, "ok": False, "error": "frame_id is not a safe file name"}
    try:
        cloud = read_point_cloud(job.cloud_path, job.feature_dim)
    except (OSError, ValueError) as e:
        result = FrameError(fid, "read", f"{type(e).__name__}: {e}")
    else:
        result = process_frame(cloud, job.frame, config)
    return write_result(result, Path(out_dir))


def _run_chunk(args) -> list[dict]:
    jobs, config, out_dir = args
    return [_run_job(job, config, out_dir) for job in jobs]


def run_pipeline_on_disk(
    jobs: Sequence[FrameJob], config: PipelineConfig, out_dir, workers: int = 1, progress: bool = False
) -> dict:
    """Process frames from disk into ``out_dir`` (one output set per frame) and write ``summary.json``.

    Output bytes are independent of ``workers``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries: list[dict] = []
    if workers <= 1:
        for n, job in enumerate(jobs, 1):
            entries.append(_run_job(job, config, str(out)))
            if progress and n % 100 == 0:
                log.info("processed %d/%d frames", n, len(jobs))
    else:
        size = max(1, math.ceil(len(jobs) / (workers * 4)))
        chunks = [(list(jobs[i : i + size]), config, str(out)) for i in range(0, len(jobs), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk_entries in pool.map(_run_chunk, chunks):
                entries.extend(chunk_entries)
                if progress:
                    log.info("processed %d/%d frames", len(entries), len(jobs))

    failed = sorted(e["frame_id"] for e in entries if not e["ok"])
    summary = {"frames": len(entries), "ok": len(entries) - len(failed), "failed": len(failed), "failed_ids": failed}
    atomic_write_bytes(out / "summary.json", (json.dumps(summary, sort_keys=True, indent=2) + "\n").encode())
    return summary
