import numpy as np
import pytest

from cityloc.geometry import Pose
from cityloc.mapmodel import Landmark, MapTile, graph_from_landmarks


def random_unit_descriptors(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_descriptor_tile(rng, n_landmarks=50, desc_per_lm=3, dim=16,
                         noise=0.05, n_cameras=4, area=150.0,
                         with_orientations=True):
    """A tile whose landmark descriptors are noisy copies of per-landmark
    ground-truth unit vectors; returns (tile, ground-truth descriptors)."""
    gt = random_unit_descriptors(rng, n_landmarks, dim)
    cam_ids = np.arange(n_cameras, dtype=np.int64)
    landmarks = []
    for i in range(n_landmarks):
        desc = (gt[i] + rng.normal(scale=noise, size=(desc_per_lm, dim))
                ).astype(np.float32)
        obs = rng.choice(cam_ids, size=int(rng.integers(1, n_cameras + 1)),
                         replace=False)
        ori = rng.uniform(-np.pi, np.pi, size=desc_per_lm).astype(np.float32) \
            if with_orientations else None
        pos = rng.uniform([0, 0, 0], [area, area, 6.0])
        landmarks.append(Landmark(i, pos, desc, obs, ori))
    poses = {int(c): Pose.identity() for c in cam_ids}
    graph = graph_from_landmarks(landmarks, cam_ids)
    tile = MapTile(0, 0, (-10.0, area + 10, -10.0, area + 10), landmarks,
                   cam_ids, poses, graph, coverage_min=0)
    return tile, gt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
