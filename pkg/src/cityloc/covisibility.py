"""Covisibility-based match filtering and binomial relevance scoring.

The covisibility filter keeps only matches whose landmarks fall in the
largest connected component of the bipartite subgraph induced by the matched
landmarks and their observing cameras.

Binomial relevance ranks database cameras for the refinement stage: under
the null hypothesis that matches land on cameras at random, the match count
of camera i is Bin(N, p_i) with p_i proportional to the camera's descriptor
count; cameras with more matches than expected are relevant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .matching import NnMatch


class _UnionFind:
    def __init__(self):
        self.parent: Dict[int, int] = {}

    def find(self, a: int) -> int:
        p = self.parent
        if a not in p:
            p[a] = a
            return a
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:  # path compression
            p[a], a = root, p[a]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def covis_filter(matches: Sequence[NnMatch],
                 observers_of: Dict[int, np.ndarray]) -> List[NnMatch]:
    """Keep matches inside the largest connected component.

    ``observers_of`` maps landmark id to its observing camera ids.  The
    largest component has the most distinct matched landmarks; ties break by
    summed match count, then by smallest member camera id.  Idempotent.
    """
    if not matches:
        return []
    uf = _UnionFind()
    for m in matches:
        lm_node = m.landmark_id * 2
        for cam in observers_of[m.landmark_id]:
            uf.union(lm_node, int(cam) * 2 + 1)
    comp_landmarks: Dict[int, set] = {}
    comp_matches: Dict[int, int] = {}
    comp_min_cam: Dict[int, int] = {}
    for m in matches:
        root = uf.find(m.landmark_id * 2)
        comp_landmarks.setdefault(root, set()).add(m.landmark_id)
        comp_matches[root] = comp_matches.get(root, 0) + 1
    for node in list(uf.parent):
        if node % 2 == 1:
            root = uf.find(node)
            cam = node // 2
            comp_min_cam[root] = min(comp_min_cam.get(root, cam), cam)
    best = max(comp_landmarks,
               key=lambda r: (len(comp_landmarks[r]), comp_matches[r],
                              -comp_min_cam.get(r, np.inf)))
    keep = comp_landmarks[best]
    return [m for m in matches if m.landmark_id in keep]


def covis_filter_tile(matches: Sequence[NnMatch], tile) -> List[NnMatch]:
    """Covisibility filter against one tile's visibility graph."""
    lm_by_id = {lm.id: lm for lm in tile.landmarks}
    observers = {m.landmark_id: lm_by_id[m.landmark_id].observer_camera_ids
                 for m in matches}
    return covis_filter(matches, observers)


@dataclass
class CandidateLocation:
    camera_id: int
    match_count: int  # x_i
    expected: float  # E[X_i] under the random-match null
    score: float  # normal-approximation z-score, prior-weighted
    prior_weight: float = 1.0


def binomial_relevance(matches: Sequence[NnMatch],
                       camera_ids: np.ndarray,
                       camera_descriptor_counts: np.ndarray,
                       observers_of: Dict[int, np.ndarray],
                       prior_weight: Optional[Callable[[int], float]] = None
                       ) -> List[CandidateLocation]:
    """Rank cameras whose match count exceeds the random-assignment mean.

    Returns cameras with x_i > E[X_i] = N * |C_i| / sum|C_k|, ranked by the
    prior-weighted z-score (x_i - E) / sqrt(N p (1 - p)).
    """
    if not matches:
        raise ValueError("no matches to score")
    cam_pos = {int(c): i for i, c in enumerate(camera_ids)}
    x = np.zeros(len(camera_ids), dtype=np.int64)
    for m in matches:
        for cam in observers_of[m.landmark_id]:
            x[cam_pos[int(cam)]] += 1
    n_total = int(x.sum())
    c = np.asarray(camera_descriptor_counts, dtype=np.float64)
    total_desc = c.sum()
    if total_desc <= 0:
        raise ValueError("tile has no descriptors")
    p = c / total_desc
    expected = n_total * p
    out = []
    for i, cid in enumerate(camera_ids):
        if x[i] <= expected[i]:
            continue
        var = n_total * p[i] * (1.0 - p[i])
        z = (x[i] - expected[i]) / np.sqrt(max(var, 1e-12))
        w = prior_weight(int(cid)) if prior_weight is not None else 1.0
        out.append(CandidateLocation(int(cid), int(x[i]), float(expected[i]),
                                     float(z * w), float(w)))
    out.sort(key=lambda c: (-c.score, c.camera_id))
    return out


def expected_match_counts(matches: Sequence[NnMatch],
                          camera_ids: np.ndarray,
                          camera_descriptor_counts: np.ndarray,
                          observers_of: Dict[int, np.ndarray]) -> np.ndarray:
    """E[X_i] per camera; sums to the total match-camera incidence count."""
    cam_pos = {int(c): i for i, c in enumerate(camera_ids)}
    x = np.zeros(len(camera_ids), dtype=np.int64)
    for m in matches:
        for cam in observers_of[m.landmark_id]:
            x[cam_pos[int(cam)]] += 1
    c = np.asarray(camera_descriptor_counts, dtype=np.float64)
    return x.sum() * c / c.sum()
