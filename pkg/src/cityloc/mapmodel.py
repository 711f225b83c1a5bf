"""Map data model: landmarks, visibility graph, tiling.

A :class:`MapModel` is the full reconstruction; :class:`MapTile` is the
150x150 m storage and query unit cut from it.  Landmark and camera ids are
global; cameras observing landmarks in several tiles are duplicated into each
of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import Camera, Pose

DEFAULT_TILE_SIZE = 150.0
TILE_BBOX_MARGIN = 10.0
DEFAULT_COVERAGE_MIN = 200


@dataclass
class Landmark:
    """A 3D point with its appearance descriptors and observing cameras."""

    id: int
    position: np.ndarray  # (3,) meters, global frame
    descriptors: np.ndarray  # (n, D) float32, or (n, M) uint8 PQ codes
    observer_camera_ids: np.ndarray  # sorted unique int64
    orientations: Optional[np.ndarray] = None  # (n,) radians in [-pi, pi)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors))
        obs = np.unique(np.asarray(self.observer_camera_ids, dtype=np.int64))
        self.observer_camera_ids = obs
        if self.descriptors.shape[0] < 1:
            raise ValueError("landmark needs at least one descriptor")
        if self.orientations is not None:
            self.orientations = np.asarray(self.orientations, dtype=np.float32)
            if self.orientations.shape[0] != self.descriptors.shape[0]:
                raise ValueError("orientation count != descriptor count")

    @property
    def num_descriptors(self) -> int:
        return self.descriptors.shape[0]


@dataclass
class VisibilityGraph:
    """Bipartite camera<->landmark adjacency, CSR in both directions.

    Indices are dense: cameras 0..M-1 and landmarks 0..N-1 in the order of
    the owning container's camera/landmark lists.
    """

    cam_ptr: np.ndarray  # (M+1,) int64
    cam_lms: np.ndarray  # landmark indices, grouped per camera, sorted
    lm_ptr: np.ndarray  # (N+1,) int64
    lm_cams: np.ndarray  # camera indices, grouped per landmark, sorted

    @property
    def num_cameras(self) -> int:
        return len(self.cam_ptr) - 1

    @property
    def num_landmarks(self) -> int:
        return len(self.lm_ptr) - 1

    @property
    def num_edges(self) -> int:
        return len(self.cam_lms)

    def camera_landmarks(self, cam_idx: int) -> np.ndarray:
        return self.cam_lms[self.cam_ptr[cam_idx]:self.cam_ptr[cam_idx + 1]]

    def landmark_cameras(self, lm_idx: int) -> np.ndarray:
        return self.lm_cams[self.lm_ptr[lm_idx]:self.lm_ptr[lm_idx + 1]]

    def camera_degrees(self) -> np.ndarray:
        return np.diff(self.cam_ptr)

    def landmark_degrees(self) -> np.ndarray:
        return np.diff(self.lm_ptr)


def build_visibility_graph(num_cameras: int,
                           observations: List[Tuple[int, int]]) -> VisibilityGraph:
    """Build the bipartite CSR graph from (camera_idx, landmark_idx) edges.

    Edges must reference dense indices; dangling indices raise ValueError.
    Duplicate observations collapse to a single edge.
    """
    if observations:
        edges = np.unique(np.asarray(observations, dtype=np.int64), axis=0)
        cams, lms = edges[:, 0], edges[:, 1]
        num_landmarks = int(lms.max()) + 1 if len(lms) else 0
        if cams.min() < 0 or lms.min() < 0:
            raise ValueError("negative node index")
        if cams.max() >= num_cameras:
            raise ValueError(f"camera index {cams.max()} out of range")
    else:
        cams = np.zeros(0, dtype=np.int64)
        lms = np.zeros(0, dtype=np.int64)
        num_landmarks = 0
    cam_ptr = np.zeros(num_cameras + 1, dtype=np.int64)
    np.add.at(cam_ptr, cams + 1, 1)
    cam_ptr = np.cumsum(cam_ptr)
    order = np.lexsort((lms, cams))
    cam_lms = lms[order]

    lm_ptr = np.zeros(num_landmarks + 1, dtype=np.int64)
    np.add.at(lm_ptr, lms + 1, 1)
    lm_ptr = np.cumsum(lm_ptr)
    order = np.lexsort((cams, lms))
    lm_cams = cams[order]
    return VisibilityGraph(cam_ptr, cam_lms, lm_ptr, lm_cams)


def graph_from_cam_csr(cam_ptr: np.ndarray, cam_lms: np.ndarray,
                       num_landmarks: int) -> VisibilityGraph:
    """Rebuild both CSR directions from the camera-direction arrays."""
    cams = np.repeat(np.arange(len(cam_ptr) - 1, dtype=np.int64),
                     np.diff(cam_ptr))
    lm_ptr = np.zeros(num_landmarks + 1, dtype=np.int64)
    if len(cam_lms) and cam_lms.max() >= num_landmarks:
        raise ValueError("landmark index out of range")
    np.add.at(lm_ptr, cam_lms + 1, 1)
    lm_ptr = np.cumsum(lm_ptr)
    order = np.lexsort((cams, cam_lms))
    return VisibilityGraph(np.asarray(cam_ptr, dtype=np.int64),
                           np.asarray(cam_lms, dtype=np.int64),
                           lm_ptr, cams[order])


def graph_from_landmarks(landmarks: List[Landmark],
                         camera_ids: np.ndarray) -> VisibilityGraph:
    """Visibility graph over dense indices induced by the landmarks'
    observer lists; camera_ids fixes the dense camera ordering."""
    cam_index = {int(c): i for i, c in enumerate(camera_ids)}
    edges = []
    for j, lm in enumerate(landmarks):
        for c in lm.observer_camera_ids:
            ci = cam_index.get(int(c))
            if ci is None:
                raise ValueError(f"landmark {lm.id} observed by unknown camera {c}")
            edges.append((ci, j))
    g = build_visibility_graph(len(camera_ids), edges)
    # Landmarks without edges still need slots in the landmark direction.
    if g.num_landmarks < len(landmarks):
        pad = len(landmarks) - g.num_landmarks
        g.lm_ptr = np.concatenate([g.lm_ptr, np.full(pad, g.lm_ptr[-1])])
    return g


@dataclass
class MapModel:
    """Full map: global camera poses and landmarks with observer lists."""

    camera_ids: np.ndarray  # (M,) int64
    camera_poses: Dict[int, Pose]
    camera_intrinsics: Dict[int, Camera]
    landmarks: List[Landmark] = field(default_factory=list)

    @property
    def num_cameras(self) -> int:
        return len(self.camera_ids)

    @property
    def num_landmarks(self) -> int:
        return len(self.landmarks)

    def total_descriptors(self) -> int:
        return sum(lm.num_descriptors for lm in self.landmarks)

    def visibility(self) -> VisibilityGraph:
        return graph_from_landmarks(self.landmarks, self.camera_ids)


@dataclass
class MapTile:
    """One grid cell of the map, immutable once built/loaded."""

    gx: int
    gy: int
    bounds: Tuple[float, float, float, float]  # x0, x1, y0, y1 (inflated)
    landmarks: List[Landmark]
    camera_ids: np.ndarray  # (M,) int64, cameras duplicated across tiles
    camera_poses: Dict[int, Pose]
    graph: VisibilityGraph
    pca: Optional[object] = None  # projection.PcaProjection
    pq: Optional[object] = None  # pq.PqCodebook
    coverage_min: int = DEFAULT_COVERAGE_MIN

    @property
    def tile_id(self) -> Tuple[int, int]:
        return (self.gx, self.gy)

    @property
    def num_landmarks(self) -> int:
        return len(self.landmarks)

    def landmark_positions(self) -> np.ndarray:
        if not self.landmarks:
            return np.zeros((0, 3))
        return np.stack([lm.position for lm in self.landmarks])

    def total_descriptors(self) -> int:
        return sum(lm.num_descriptors for lm in self.landmarks)

    def camera_descriptor_counts(self) -> np.ndarray:
        """Descriptors visible per camera (dense camera index order)."""
        counts = np.zeros(len(self.camera_ids), dtype=np.int64)
        ndesc = np.array([lm.num_descriptors for lm in self.landmarks])
        for j in range(self.num_landmarks):
            counts[self.graph.landmark_cameras(j)] += ndesc[j]
        return counts

    def check_invariants(self) -> List[str]:
        """Returns a list of violated invariants (empty when consistent)."""
        problems = []
        x0, x1, y0, y1 = self.bounds
        for lm in self.landmarks:
            x, y = lm.position[0], lm.position[1]
            if not (x0 <= x <= x1 and y0 <= y <= y1):
                problems.append(f"landmark {lm.id} outside tile bounds")
        deg = self.graph.camera_degrees()
        for i, d in enumerate(deg):
            if d < 1:
                problems.append(f"camera {self.camera_ids[i]} observes nothing")
        lm_count = np.zeros(len(self.camera_ids), dtype=np.int64)
        for j in range(self.num_landmarks):
            lm_count[self.graph.landmark_cameras(j)] += 1
        for i, c in enumerate(lm_count):
            if c < self.coverage_min:
                problems.append(
                    f"camera {self.camera_ids[i]} covers {c} < {self.coverage_min}")
        return problems


def tile_key(x: float, y: float, tile_size: float) -> Tuple[int, int]:
    return (int(np.floor(x / tile_size)), int(np.floor(y / tile_size)))


def make_tile(model: MapModel, gx: int, gy: int, tile_size: float,
              landmarks: List[Landmark],
              coverage_min: int = DEFAULT_COVERAGE_MIN) -> MapTile:
    cam_ids = np.unique(np.concatenate(
        [lm.observer_camera_ids for lm in landmarks])) if landmarks else \
        np.zeros(0, dtype=np.int64)
    x0 = gx * tile_size - TILE_BBOX_MARGIN
    x1 = (gx + 1) * tile_size + TILE_BBOX_MARGIN
    y0 = gy * tile_size - TILE_BBOX_MARGIN
    y1 = (gy + 1) * tile_size + TILE_BBOX_MARGIN
    graph = graph_from_landmarks(landmarks, cam_ids)
    poses = {int(c): model.camera_poses[int(c)] for c in cam_ids}
    return MapTile(gx, gy, (x0, x1, y0, y1), landmarks, cam_ids, poses, graph,
                   coverage_min=coverage_min)


def split_into_tiles(model: MapModel,
                     tile_size: float = DEFAULT_TILE_SIZE,
                     coverage_min: int = DEFAULT_COVERAGE_MIN) -> List[MapTile]:
    """Partition the model on a regular x,y grid.

    Landmarks are assigned by position; cameras are duplicated into every
    tile holding a landmark they observe.  Tiles are returned sorted by
    (gx, gy).
    """
    if model.num_landmarks == 0:
        raise ValueError("cannot tile an empty model")
    buckets: Dict[Tuple[int, int], List[Landmark]] = {}
    for lm in model.landmarks:
        key = tile_key(lm.position[0], lm.position[1], tile_size)
        buckets.setdefault(key, []).append(lm)
    tiles = []
    for (gx, gy) in sorted(buckets):
        tiles.append(make_tile(model, gx, gy, tile_size, buckets[(gx, gy)],
                               coverage_min=coverage_min))
    return tiles
