import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adprep.geometry import PointCloud, column_centers, from_spherical  # noqa: E402

N_BEAMS, N_COLS = 40, 1800


def once_like_inclinations(n=N_BEAMS):
    return np.linspace(math.radians(-25.0), math.radians(15.0), n)


def constructive_scan(n_beams=N_BEAMS, n_cols=N_COLS, seed=0, with_intensity=True):
    """One point at the center of every range-image cell, row-major."""
    rng = np.random.default_rng(seed)
    incl = once_like_inclinations(n_beams)
    phi, theta = np.meshgrid(incl, column_centers(n_cols), indexing="ij")
    r = rng.uniform(1.0, 75.0, size=phi.shape)
    xyz = from_spherical(np.stack([r, theta, phi], axis=-1).reshape(-1, 3))
    if with_intensity:
        xyz = np.concatenate([xyz, rng.random((len(xyz), 1))], axis=1)
    return PointCloud(xyz), incl


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scan():
    return constructive_scan()


def table2_frames():
    """100 frames holding 1567 Vehicles, 163 Pedestrians and 190 Cyclists in total."""
    from adprep.boxes import Box3D
    from adprep.labeling import Detection, LabeledFrame

    rng = np.random.default_rng(2)
    frames = []
    totals = {"Vehicle": 1567, "Pedestrian": 163, "Cyclist": 190}
    per_frame = {c: np.bincount(rng.integers(0, 100, n), minlength=100) for c, n in totals.items()}
    for k in range(100):
        dets = []
        for cls, counts in per_frame.items():
            for _ in range(counts[k]):
                box = Box3D(*rng.uniform(-40, 40, 2), 0.0, 4.0, 2.0, 1.6, rng.uniform(-3, 3))
                dets.append(Detection(box, cls, float(rng.uniform(0.8, 1.0)), "pv_rcnn_pp"))
        frames.append(LabeledFrame(f"frame_{k:03d}", tuple(dets)))
    return frames
