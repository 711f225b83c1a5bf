"""Descriptor matching primitives shared by every index.

Matching operates on *augmented* descriptors: the projected descriptor plus
two optional weighted channels appended as extra dimensions, making the
ranking distance

    total = ||q - d||^2 + w_rot^2 * ||e(th_q) - e(th_d)||^2
          + w_gps^2 * ||xy_q - xy_d||^2 / radius^2

where e(th) = (cos th, sin th) is the wrap-safe orientation embedding, and
the position channel compares the query's location prior with the landmark
position.  Disabling a channel removes exactly its term.

A :class:`DescriptorTable` flattens one tile's descriptors into arrays; it
is the substrate for the brute-force oracle and for both ANN indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from .mapmodel import MapTile
from .pq import PqCodebook, pq_decode, pq_distance_table

DEFAULT_ROTATION_WEIGHT = 0.02
DEFAULT_PRIOR_WEIGHT = 0.005
DEFAULT_PRIOR_RADIUS = 25.0
HARD_ORIENTATION_LIMIT = np.deg2rad(30.0)


class NnMatch(NamedTuple):
    """One keypoint-to-landmark candidate."""

    keypoint_id: int
    landmark_id: int
    descriptor_ref: int
    distance_sq: float


@dataclass
class QueryStats:
    """Filled in by index queries when passed as an out-parameter."""

    scanned_rows: int = 0
    visited_cells: int = 0


@dataclass(frozen=True)
class AugmentConfig:
    use_orientation: bool = True
    use_prior: bool = True
    w_rot: float = DEFAULT_ROTATION_WEIGHT
    w_gps: float = DEFAULT_PRIOR_WEIGHT
    prior_radius: float = DEFAULT_PRIOR_RADIUS
    hard_orientation: bool = False  # reject |dth| > 30 deg instead of soft term

    @property
    def channel_dim(self) -> int:
        return (2 if self.use_orientation else 0) + (2 if self.use_prior else 0)


@dataclass(frozen=True)
class AugmentedDescriptor:
    """Query-side augmented descriptor."""

    desc: np.ndarray  # projected descriptor
    channels: np.ndarray  # weighted channel values, shape (channel_dim,)
    orientation: Optional[float] = None  # kept for hard filtering
    config: AugmentConfig = field(default_factory=AugmentConfig)


def orientation_channel(theta, w_rot: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([w_rot * np.cos(theta), w_rot * np.sin(theta)], axis=-1)


def prior_channel(xy, w_gps: float, radius: float) -> np.ndarray:
    return np.asarray(xy, dtype=np.float64) * (w_gps / radius)


def augment_query(desc: np.ndarray, cfg: AugmentConfig,
                  orientation: Optional[float] = None,
                  prior_xy: Optional[np.ndarray] = None) -> AugmentedDescriptor:
    parts = []
    if cfg.use_orientation:
        if orientation is None:
            raise ValueError("orientation channel active but no orientation given")
        parts.append(orientation_channel(orientation, cfg.w_rot))
    if cfg.use_prior:
        if prior_xy is None:
            raise ValueError("prior channel active but no position prior given")
        parts.append(prior_channel(prior_xy, cfg.w_gps, cfg.prior_radius))
    ch = np.concatenate(parts) if parts else np.zeros(0)
    return AugmentedDescriptor(np.asarray(desc, dtype=np.float64), ch,
                               orientation, cfg)


class DescriptorTable:
    """One tile's descriptors flattened for matching.

    Rows are descriptor slots; ``descriptor_ref`` is the row index.  Raw
    tiles score with exact squared L2; PQ tiles score the descriptor part
    with the code-distance lookup table while hashing uses the decoded
    vectors.
    """

    def __init__(self, tile: MapTile, cfg: AugmentConfig):
        self.cfg = cfg
        self.tile = tile
        n = tile.total_descriptors()
        self.lm_index = np.empty(n, dtype=np.int64)
        self.lm_ids = np.empty(n, dtype=np.int64)
        self.positions = np.empty((n, 2), dtype=np.float64)
        rows = []
        oris = []
        self.lm_row_ptr = np.zeros(len(tile.landmarks) + 1, dtype=np.int64)
        at = 0
        for j, lm in enumerate(tile.landmarks):
            c = lm.num_descriptors
            self.lm_index[at:at + c] = j
            self.lm_ids[at:at + c] = lm.id
            self.positions[at:at + c] = lm.position[:2]
            rows.append(lm.descriptors)
            if lm.orientations is not None:
                oris.append(lm.orientations)
            at += c
            self.lm_row_ptr[j + 1] = at
        data = np.concatenate(rows, axis=0) if rows else np.zeros((0, 0))
        self.orientations = np.concatenate(oris) if len(oris) == len(rows) and rows \
            else None
        self.pq: Optional[PqCodebook] = None
        if data.dtype == np.uint8 or data.dtype == np.uint16:
            if tile.pq is None:
                raise ValueError("tile holds PQ codes but no codebook")
            self.pq = tile.pq
            self.codes = data
            self.vectors = pq_decode(self.pq, data) if n else np.zeros((0, tile.pq.dim))
        else:
            self.codes = None
            self.vectors = np.asarray(data, dtype=np.float64)

        chans = []
        if cfg.use_orientation:
            if self.orientations is None:
                raise ValueError("orientation channel active but tile has no orientations")
            chans.append(orientation_channel(self.orientations, cfg.w_rot))
        if cfg.use_prior:
            chans.append(prior_channel(self.positions, cfg.w_gps, cfg.prior_radius))
        self.channels = np.concatenate(chans, axis=1) if chans \
            else np.zeros((n, 0))
        # Hash-space vectors: descriptor part plus weighted channels.
        self.hash_vectors = np.concatenate([self.vectors, self.channels], axis=1)

    @property
    def num_rows(self) -> int:
        return len(self.lm_index)

    def rows_of_landmarks(self, lm_indices) -> np.ndarray:
        """Descriptor rows of the given tile-local landmark indices
        (rows are contiguous per landmark)."""
        parts = [np.arange(self.lm_row_ptr[j], self.lm_row_ptr[j + 1])
                 for j in np.atleast_1d(lm_indices)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    @property
    def descriptor_dim(self) -> int:
        return self.vectors.shape[1]

    def query_hash_vector(self, q: AugmentedDescriptor) -> np.ndarray:
        return np.concatenate([q.desc, q.channels])

    def distances(self, q: AugmentedDescriptor,
                  rows: Optional[np.ndarray] = None) -> np.ndarray:
        """Exact augmented squared distances to the given rows (or all)."""
        if rows is None:
            rows = slice(None)
        if self.pq is not None:
            lut = pq_distance_table(self.pq, q.desc)
            codes = self.codes[rows]
            d = np.zeros(codes.shape[0], dtype=np.float64)
            for j in range(self.pq.num_subspaces):
                d += lut[j][codes[:, j]]
        else:
            diff = self.vectors[rows] - q.desc
            d = np.einsum("ij,ij->i", diff, diff)
        if self.channels.shape[1]:
            cdiff = self.channels[rows] - q.channels
            d = d + np.einsum("ij,ij->i", cdiff, cdiff)
        return d

    def orientation_ok(self, q: AugmentedDescriptor,
                       rows: np.ndarray) -> np.ndarray:
        """Hard-filter mask: |wrapped orientation difference| <= 30 deg."""
        if not self.cfg.hard_orientation or q.orientation is None \
                or self.orientations is None:
            return np.ones(len(rows), dtype=bool)
        d = np.abs(np.angle(np.exp(1j * (self.orientations[rows] - q.orientation))))
        return d <= HARD_ORIENTATION_LIMIT


def rank_rows(table: DescriptorTable, q: AugmentedDescriptor,
              rows: np.ndarray, k: int, keypoint_id: int) -> List[NnMatch]:
    """Exact distances on candidate rows; canonical k-best ordering.

    Ties break by (distance, landmark id, descriptor ref).
    """
    if len(rows) == 0:
        return []
    rows = np.asarray(rows)
    mask = table.orientation_ok(q, rows)
    rows = rows[mask]
    if len(rows) == 0:
        return []
    d = table.distances(q, rows)
    order = np.lexsort((rows, table.lm_ids[rows], d))[:k]
    return [NnMatch(keypoint_id, int(table.lm_ids[rows[i]]), int(rows[i]),
                    float(d[i])) for i in order]


def brute_force_knn(table: DescriptorTable, q: AugmentedDescriptor, k: int,
                    keypoint_id: int = 0) -> List[NnMatch]:
    """Exact k nearest rows of the whole table (the oracle matcher)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if table.num_rows == 0:
        raise ValueError("empty tile has no descriptors to match")
    return rank_rows(table, q, np.arange(table.num_rows), k, keypoint_id)


def filter_matches_absolute(matches: List[NnMatch], tau: float) -> List[NnMatch]:
    """Range filter: keep matches with squared distance <= tau^2."""
    lim = tau * tau
    return [m for m in matches if m.distance_sq <= lim]


def filter_matches_ratio(matches: List[NnMatch], second_word_dist_sq: float,
                         rho: float) -> List[NnMatch]:
    """Vocabulary ratio test: keep d^2 <= rho^2 * (query's squared distance
    to its second-nearest product word)."""
    lim = rho * rho * second_word_dist_sq
    return [m for m in matches if m.distance_sq <= lim]


def filter_matches(matches: List[NnMatch], mode: str, tau: float = None,
                   rho: float = None, imi=None,
                   query: AugmentedDescriptor = None) -> List[NnMatch]:
    """Dispatch to the absolute-threshold or ratio-vs-words filter."""
    if mode == "absolute":
        if tau is None:
            raise ValueError("absolute mode needs tau")
        return filter_matches_absolute(matches, tau)
    if mode == "ratio":
        if imi is None or rho is None or query is None:
            raise ValueError("ratio mode needs an inverted multi-index, rho and the query")
        return filter_matches_ratio(matches, imi.second_word_distance_sq(query),
                                    rho)
    raise ValueError(f"unknown filter mode {mode!r}")
