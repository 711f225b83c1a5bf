"""Offline map construction: tiling, landmark selection, appearance
summarization, projection and product quantization."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .appearance import summarize_appearance
from .mapmodel import (
    DEFAULT_COVERAGE_MIN,
    DEFAULT_TILE_SIZE,
    Landmark,
    MapModel,
    MapTile,
    make_tile,
    split_into_tiles,
)
from .pq import PqCodebook, pq_encode, train_pq
from .projection import PcaProjection, train_pca
from .projection import project as pca_project
from .seeding import derive_seed
from .selection import problem_from_tile, select_ilp, select_obs_count


@dataclass
class CompressionConfig:
    tile_size: float = DEFAULT_TILE_SIZE
    coverage_min: int = DEFAULT_COVERAGE_MIN  # b in the selection problem
    selection: str = "ilp"  # ilp | obs | none
    descriptor_budget: Optional[int] = None  # obs mode, per tile
    landmark_budget: Optional[int] = None  # ilp mode, per tile (n_desired)
    selection_lambda: float = 10.0
    appearance: Optional[str] = "kmeans"  # kmeans | kmedoids | random | None
    appearance_ratio: Optional[float] = 0.25
    appearance_fixed: Optional[int] = None
    project: bool = True
    projected_dim: int = 16
    quantize: bool = True
    pq_subspaces: int = 2
    pq_words: int = 256
    train_sample: int = 20000
    codebook_restarts: int = 2
    codebook_iters: int = 25
    seed: int = 0


def _sample_descriptors(model: MapModel, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "train-sample"))
    per = [lm.descriptors for lm in model.landmarks]
    flat = np.concatenate(per, axis=0).astype(np.float64)
    if len(flat) > n:
        flat = flat[rng.choice(len(flat), size=n, replace=False)]
    return flat


def select_tile_landmarks(tile: MapTile, cfg: CompressionConfig) -> List[Landmark]:
    if cfg.selection == "none":
        return list(tile.landmarks)
    if cfg.selection == "obs":
        budget = cfg.descriptor_budget or tile.total_descriptors()
        keep = set(select_obs_count(tile, budget).tolist())
        return [lm for lm in tile.landmarks if lm.id in keep]
    if cfg.selection == "ilp":
        n = tile.num_landmarks
        n_desired = min(cfg.landmark_budget or n, n)
        problem = problem_from_tile(tile, b=cfg.coverage_min,
                                    n_desired=n_desired,
                                    lam=cfg.selection_lambda)
        res = select_ilp(problem)
        return [tile.landmarks[j] for j in res.selected]
    raise ValueError(f"unknown selection strategy {cfg.selection!r}")


def select_ilp_descriptor_budget(tile: MapTile, descriptor_budget: int,
                                 cfg: CompressionConfig) -> List[Landmark]:
    """ILP selection sized to a *descriptor* budget by bisecting n_desired
    (equal-memory comparisons against the observation-count heuristic)."""
    counts = np.array([lm.num_descriptors for lm in tile.landmarks])
    lo, hi = 1, tile.num_landmarks
    best = None
    while lo <= hi:
        mid = (lo + hi) // 2
        kept = select_tile_landmarks(
            tile, replace(cfg, selection="ilp", landmark_budget=mid))
        total = sum(lm.num_descriptors for lm in kept)
        if total <= descriptor_budget:
            best = kept
            lo = mid + 1
        else:
            hi = mid - 1
    if best is None:
        best = select_tile_landmarks(
            tile, replace(cfg, selection="ilp", landmark_budget=1))
    return best


def summarize_tile_landmarks(landmarks: List[Landmark],
                             cfg: CompressionConfig) -> List[Landmark]:
    if cfg.appearance is None:
        return landmarks
    out = []
    for lm in landmarks:
        desc, ori = summarize_appearance(
            lm.descriptors, cfg.appearance,
            seed=derive_seed(cfg.seed, "appearance", lm.id),
            fixed_k=cfg.appearance_fixed, ratio=cfg.appearance_ratio,
            orientations=lm.orientations)
        out.append(Landmark(lm.id, lm.position, desc,
                            lm.observer_camera_ids, ori))
    return out


@dataclass
class MapArtifacts:
    pca: Optional[PcaProjection]
    pq: Optional[PqCodebook]


def build_tiles(model: MapModel, cfg: CompressionConfig
                ) -> Tuple[List[MapTile], MapArtifacts]:
    """Full offline pipeline: tile, select, summarize, project, quantize."""
    pca = None
    if cfg.project:
        pca = train_pca(_sample_descriptors(model, cfg.train_sample, cfg.seed),
                        d=cfg.projected_dim)
    raw_tiles = split_into_tiles(model, cfg.tile_size,
                                 coverage_min=cfg.coverage_min)

    kept_per_tile = []
    for tile in raw_tiles:
        kept = select_tile_landmarks(tile, cfg)
        kept = summarize_tile_landmarks(kept, cfg)
        if cfg.project:
            kept = [Landmark(lm.id, lm.position,
                             pca_project(pca, lm.descriptors).astype(np.float32),
                             lm.observer_camera_ids, lm.orientations)
                    for lm in kept]
        kept_per_tile.append(kept)

    pq = None
    if cfg.quantize:
        sample = np.concatenate(
            [lm.descriptors for kept in kept_per_tile for lm in kept], axis=0)
        rng = np.random.default_rng(derive_seed(cfg.seed, "pq-sample"))
        if len(sample) > cfg.train_sample:
            sample = sample[rng.choice(len(sample), size=cfg.train_sample,
                                       replace=False)]
        k = min(cfg.pq_words, max(2, len(sample) // 4))
        pq = train_pq(sample.astype(np.float64), m=cfg.pq_subspaces, k=k,
                      seed=derive_seed(cfg.seed, "pq-train"),
                      restarts=cfg.codebook_restarts, iters=cfg.codebook_iters)

    tiles = []
    for tile, kept in zip(raw_tiles, kept_per_tile):
        if not kept:
            continue
        if pq is not None:
            kept = [Landmark(lm.id, lm.position,
                             pq_encode(pq, lm.descriptors.astype(np.float64)),
                             lm.observer_camera_ids, lm.orientations)
                    for lm in kept]
        new = make_tile(model, tile.gx, tile.gy, cfg.tile_size, kept,
                        coverage_min=cfg.coverage_min)
        new.pca = pca
        new.pq = pq
        tiles.append(new)
    return tiles, MapArtifacts(pca, pq)
