import numpy as np
import pytest

from cityloc.geometry import Camera, Pose
from cityloc.mapmodel import (
    Landmark,
    MapModel,
    build_visibility_graph,
    graph_from_landmarks,
    split_into_tiles,
)

CAM = Camera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def make_model(positions, observers):
    lms = []
    all_cams = sorted({c for obs in observers for c in obs})
    for i, (p, obs) in enumerate(zip(positions, observers)):
        desc = np.random.default_rng(i).normal(size=(len(obs), 16)).astype(np.float32)
        lms.append(Landmark(i, np.asarray(p, float), desc,
                            np.asarray(obs, dtype=np.int64)))
    poses = {c: Pose.identity() for c in all_cams}
    intr = {c: CAM for c in all_cams}
    return MapModel(np.asarray(all_cams, dtype=np.int64), poses, intr, lms)


class TestVisibilityGraph:
    def test_single_edge(self):
        g = build_visibility_graph(1, [(0, 0)])
        assert g.num_edges == 1
        assert list(g.camera_landmarks(0)) == [0]
        assert list(g.landmark_cameras(0)) == [0]

    def test_empty(self):
        g = build_visibility_graph(3, [])
        assert g.num_edges == 0
        assert g.num_cameras == 3
        assert all(g.camera_degrees() == 0)

    def test_degree_recount(self):
        rng = np.random.default_rng(3)
        m, n = 6, 40
        edges = set()
        for c in range(m):
            for lm in rng.choice(n, size=rng.integers(1, 15), replace=False):
                edges.add((c, int(lm)))
        g = build_visibility_graph(m, sorted(edges))
        # recount both directions independently
        for c in range(m):
            want = sorted(lm for (cc, lm) in edges if cc == c)
            assert list(g.camera_landmarks(c)) == want
        assert g.camera_degrees().sum() == g.landmark_degrees().sum() == len(edges)

    def test_dangling_camera_rejected(self):
        with pytest.raises(ValueError):
            build_visibility_graph(1, [(1, 0)])

    def test_from_landmarks_unknown_camera(self):
        lm = Landmark(0, np.zeros(3), np.zeros((1, 16), np.float32),
                      np.array([5]))
        with pytest.raises(ValueError):
            graph_from_landmarks([lm], np.array([1, 2]))


class TestSplitIntoTiles:
    def test_single_tile(self):
        model = make_model([[10, 10, 1], [100, 80, 2]], [[0], [0]])
        tiles = split_into_tiles(model, 150.0)
        assert len(tiles) == 1
        assert tiles[0].tile_id == (0, 0)

    def test_two_tiles_along_x(self):
        model = make_model([[10, 5, 0], [200, 5, 0]], [[0], [0]])
        tiles = split_into_tiles(model, 150.0)
        assert [t.tile_id for t in tiles] == [(0, 0), (1, 0)]
        # camera 0 observes in both -> duplicated
        assert all(0 in t.camera_ids for t in tiles)

    def test_partition_covers_model(self):
        rng = np.random.default_rng(11)
        positions = rng.uniform([0, 0, 0], [400, 400, 5], size=(200, 3))
        observers = [[int(c) for c in rng.choice(8, size=2, replace=False)]
                     for _ in range(200)]
        model = make_model(positions, observers)
        tiles = split_into_tiles(model, 150.0)
        occupied = {(int(np.floor(p[0] / 150)), int(np.floor(p[1] / 150)))
                    for p in positions}
        assert {t.tile_id for t in tiles} == occupied
        ids = sorted(lm.id for t in tiles for lm in t.landmarks)
        assert ids == list(range(200))
        for t in tiles:
            x0, x1, y0, y1 = t.bounds
            for lm in t.landmarks:
                assert x0 <= lm.position[0] <= x1
                assert y0 <= lm.position[1] <= y1

    def test_empty_model_rejected(self):
        model = make_model([], [])
        with pytest.raises(ValueError):
            split_into_tiles(model)


class TestLandmark:
    def test_requires_descriptor(self):
        with pytest.raises(ValueError):
            Landmark(0, np.zeros(3), np.zeros((0, 16), np.float32), np.array([0]))

    def test_observers_sorted_unique(self):
        lm = Landmark(0, np.zeros(3), np.zeros((1, 16), np.float32),
                      np.array([3, 1, 3]))
        assert list(lm.observer_camera_ids) == [1, 3]
