"""The two-stage localization pipeline over a set of loaded tiles.

Stage 1: per-keypoint ANN retrieval (k neighbors), descriptor-distance
thresholding, optional covisibility filtering, 4D pose voting, and RANSAC on
the top voting candidates.  If the best candidate fails the acceptance gate,
stage 2 ranks database cameras by binomial relevance, re-matches the query
against each of the top-M cameras' descriptors and runs RANSAC again; the
best result overall is returned.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .covisibility import binomial_relevance, covis_filter
from .geometry import Camera
from .imi import InvertedMultiIndex
from .mapmodel import MapTile
from .matching import AugmentConfig, DescriptorTable, NnMatch, augment_query
from .projection import project as pca_project
from .random_grids import RandomGridsIndex, default_cell_width
from .ransac import Correspondence, LocalizationResult, RansacConfig, ransac
from .scene_sim import QueryFrame
from .seeding import derive_seed
from .voting import VoteGridConfig, grid_around, matches_consistent_with, vote_4d


@dataclass
class PipelineConfig:
    """All pipeline knobs; loadable from YAML (see config module)."""

    k: int = 4  # retrieved neighbors per keypoint
    index: str = "rg"  # rg | imi | brute
    tau: Optional[float] = None  # absolute threshold; None -> calibrated
    filter_mode: str = "absolute"  # absolute | ratio | none
    rho: float = 0.9  # ratio-test factor (vs product words)
    use_voting: bool = True
    use_covis: bool = False
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    # random grids
    rg_num_grids: int = 8
    rg_max_per_cell: int = 100
    rg_cell_width: Optional[float] = None  # None -> 2*tau/sqrt(dim)
    # inverted multi-index
    imi_words: int = 64
    imi_product_words: int = 600
    # voting
    vote_half_extent: Optional[float] = None  # None -> 2 * gps sigma
    vote_voxel: float = 1.0
    vote_kappa_bins: int = 36
    vote_z_range: tuple = (-2.0, 12.0)
    vote_candidates: int = 10
    vote_max_depth: float = 150.0
    vote_slack: float = 2.0
    # pose estimation
    solver: str = "p2p"  # p2p | p3p
    ransac: RansacConfig = field(default_factory=RansacConfig)
    accept_effective_inliers: int = 15
    accept_inlier_ratio: float = 0.15
    # refinement stage
    use_refinement: bool = True
    refine_locations: int = 5  # M
    refine_k: int = 2
    seed: int = 0


@dataclass
class LocalizeFailure:
    reason: str
    stage: str
    num_matches: int = 0
    num_filtered: int = 0
    candidates_tried: int = 0

    success = False


class TileRegion:
    """Loaded tiles plus their matching tables/indices, merged lookups."""

    def __init__(self, tiles: Sequence[MapTile], cfg: PipelineConfig):
        if not tiles:
            raise ValueError("region needs at least one tile")
        self.tiles = list(tiles)
        self.cfg = cfg
        self.pca = next((t.pca for t in tiles if t.pca is not None), None)
        self.tables = [DescriptorTable(t, cfg.augment) for t in tiles]
        tau = cfg.tau if cfg.tau is not None else calibrate_tau(self.tables)
        self.tau = tau
        self.indices = []
        for i, table in enumerate(self.tables):
            if cfg.index == "rg":
                width = cfg.rg_cell_width or default_cell_width(
                    tau, table.hash_vectors.shape[1])
                self.indices.append(RandomGridsIndex(
                    table, width, cfg.rg_num_grids,
                    seed=derive_seed(cfg.seed, "rg-index", i)))
            elif cfg.index == "imi":
                self.indices.append(InvertedMultiIndex(
                    table, cfg.imi_words,
                    seed=derive_seed(cfg.seed, "imi-index", i)))
            elif cfg.index == "brute":
                self.indices.append(None)
            else:
                raise ValueError(f"unknown index {cfg.index!r}")
        # merged camera bookkeeping (cameras may repeat across tiles)
        counts: Dict[int, int] = {}
        for t, table in zip(self.tiles, self.tables):
            per_cam = t.camera_descriptor_counts()
            for cid, c in zip(t.camera_ids, per_cam):
                counts[int(cid)] = counts.get(int(cid), 0) + int(c)
        self.camera_ids = np.array(sorted(counts), dtype=np.int64)
        self.camera_descriptor_counts = np.array(
            [counts[int(c)] for c in self.camera_ids], dtype=np.int64)
        self.camera_positions = {}
        for t in self.tiles:
            for cid in t.camera_ids:
                self.camera_positions[int(cid)] = t.camera_poses[int(cid)].t
        self.position_of: Dict[int, np.ndarray] = {}
        self.observers_of: Dict[int, np.ndarray] = {}
        for t in self.tiles:
            for lm in t.landmarks:
                self.position_of[lm.id] = lm.position
                self.observers_of[lm.id] = lm.observer_camera_ids

    def total_descriptors(self) -> int:
        return sum(tb.num_rows for tb in self.tables)


def calibrate_tau(tables: Sequence[DescriptorTable], n_samples: int = 2000,
                  percentile: float = 5.0, seed: int = 0) -> float:
    """Absolute match threshold: 5th percentile of non-matching distances
    sampled from the stored descriptors themselves."""
    sizes = np.array([t.num_rows for t in tables])
    total = sizes.sum()
    if total < 2:
        return np.inf
    rng = np.random.default_rng(derive_seed(seed, "tau-calibration"))
    dists = []
    for _ in range(n_samples):
        ti = int(rng.choice(len(tables), p=sizes / total))
        table = tables[ti]
        a = int(rng.integers(table.num_rows))
        b = int(rng.integers(table.num_rows))
        if table.lm_ids[a] == table.lm_ids[b]:
            continue
        q = augment_query(
            table.vectors[a], table.cfg,
            orientation=None if table.orientations is None
            else float(table.orientations[a]),
            prior_xy=table.positions[a] if table.cfg.use_prior else None)
        dists.append(table.distances(q, np.array([b]))[0])
    if not dists:
        return np.inf
    return float(np.sqrt(np.percentile(dists, percentile)))


@dataclass
class QueryBatch:
    """One frame's keypoints in the augmented matching space."""

    desc: np.ndarray  # (n, d) projected descriptors
    channels: np.ndarray  # (n, C) weighted channel values
    orientations: np.ndarray

    def __post_init__(self):
        self._lut_cache = {}

    @property
    def hash_vectors(self) -> np.ndarray:
        return np.concatenate([self.desc, self.channels], axis=1)

    def one(self, i: int, cfg: AugmentConfig):
        from .matching import AugmentedDescriptor
        return AugmentedDescriptor(self.desc[i], self.channels[i],
                                   float(self.orientations[i]), cfg)

    def pq_luts(self, pq) -> np.ndarray:
        """(M, n_kp, k) squared subvector distance tables, cached.

        Uses the explicit-difference form so entries are bit-identical to
        pq_distance_table.
        """
        key = id(pq)
        if key not in self._lut_cache:
            xp = self.desc[:, pq.permutation]
            sub = pq.subdim
            luts = np.empty((pq.num_subspaces, len(self.desc), pq.num_words))
            for j in range(pq.num_subspaces):
                block = xp[:, j * sub:(j + 1) * sub]
                c = pq.centroids[j].astype(np.float64)
                diff = c[None, :, :] - block[:, None, :]
                luts[j] = np.einsum("nkd,nkd->nk", diff, diff)
            self._lut_cache[key] = luts
        return self._lut_cache[key]


def _augmented_queries(frame: QueryFrame, region: TileRegion) -> QueryBatch:
    from .matching import orientation_channel, prior_channel

    cfg = region.cfg.augment
    desc = frame.descriptors
    if frame.pq_codes is not None:
        from .pq import pq_decode
        pq = next((t.pq for t in region.tiles if t.pq is not None), None)
        if pq is None:
            raise ValueError("frame carries PQ codes but region has no codebook")
        desc = pq_decode(pq, frame.pq_codes)
    elif not frame.projected:
        if region.pca is None:
            raise ValueError("raw-descriptor frame but region has no projection")
        desc = pca_project(region.pca, desc)
    desc = np.asarray(desc, dtype=np.float64)
    n = len(desc)
    chans = []
    if cfg.use_orientation:
        chans.append(orientation_channel(frame.orientations, cfg.w_rot))
    if cfg.use_prior:
        if frame.gps_xy is None:
            raise ValueError("prior channel active but frame has no GPS prior")
        chans.append(np.tile(prior_channel(frame.gps_xy, cfg.w_gps,
                                           cfg.prior_radius), (n, 1)))
    ch = np.concatenate(chans, axis=1) if chans else np.zeros((n, 0))
    return QueryBatch(desc, ch, np.asarray(frame.orientations, np.float64))


def _batch_distances(table: DescriptorTable, batch: QueryBatch,
                     kp: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Exact augmented distances for (keypoint, row) candidate pairs."""
    if table.pq is not None:
        luts = batch.pq_luts(table.pq)
        codes = table.codes[rows]
        d = np.zeros(len(kp))
        for j in range(table.pq.num_subspaces):
            d += luts[j][kp, codes[:, j]]
    else:
        diff = table.vectors[rows] - batch.desc[kp]
        d = np.einsum("ij,ij->i", diff, diff)
    if table.channels.shape[1]:
        cdiff = table.channels[rows] - batch.channels[kp]
        d = d + np.einsum("ij,ij->i", cdiff, cdiff)
    return d


def _top_k_per_keypoint(kp, lms, rows, d, k):
    """Indices of the k best candidates per keypoint, canonical ties."""
    order = np.lexsort((rows, lms, d, kp))
    kp_sorted = kp[order]
    first = np.r_[True, kp_sorted[1:] != kp_sorted[:-1]]
    group_start = np.maximum.accumulate(
        np.where(first, np.arange(len(order)), 0))
    rank = np.arange(len(order)) - group_start
    return order[rank < k]


def _dense_topk_matches(table: DescriptorTable, batch: QueryBatch,
                        rows: np.ndarray, k: int,
                        tau_sq: float) -> List[NnMatch]:
    """All-keypoints x given-rows matching via one dense distance matrix."""
    n_kp = len(batch.desc)
    n_rows = len(rows)
    if n_rows == 0:
        return []
    if table.pq is not None:
        luts = batch.pq_luts(table.pq)
        codes = table.codes[rows]
        dmat = np.zeros((n_kp, n_rows))
        for j in range(table.pq.num_subspaces):
            dmat += luts[j][:, codes[:, j]]
    else:
        x = table.vectors[rows]
        dmat = (np.sum(batch.desc * batch.desc, axis=1)[:, None]
                - 2.0 * batch.desc @ x.T + np.sum(x * x, axis=1)[None, :])
    if table.channels.shape[1]:
        c = table.channels[rows]
        dmat += (np.sum(batch.channels * batch.channels, axis=1)[:, None]
                 - 2.0 * batch.channels @ c.T + np.sum(c * c, axis=1)[None, :])
    dmat = np.maximum(dmat, 0.0)
    if table.cfg.hard_orientation and table.orientations is not None:
        from .matching import HARD_ORIENTATION_LIMIT
        delta = table.orientations[rows][None, :] - batch.orientations[:, None]
        dmat[np.abs(np.angle(np.exp(1j * delta))) > HARD_ORIENTATION_LIMIT] = np.inf
    kk = min(k, n_rows)
    if kk < n_rows:
        top = np.argpartition(dmat, kk - 1, axis=1)[:, :kk]
    else:
        top = np.tile(np.arange(n_rows), (n_kp, 1))
    kp = np.repeat(np.arange(n_kp), kk)
    sel = top.ravel()
    d = dmat[kp, sel]
    keep = d <= tau_sq
    kp, sel, d = kp[keep], sel[keep], d[keep]
    rr = rows[sel]
    order = np.lexsort((rr, table.lm_ids[rr], d, kp))
    return [NnMatch(int(kp[i]), int(table.lm_ids[rr[i]]), int(rr[i]),
                    float(d[i])) for i in order]


def _hard_orientation_mask(table: DescriptorTable, batch: QueryBatch,
                           kp: np.ndarray, rows: np.ndarray) -> np.ndarray:
    if not table.cfg.hard_orientation or table.orientations is None:
        return np.ones(len(kp), dtype=bool)
    delta = table.orientations[rows] - batch.orientations[kp]
    delta = np.abs(np.angle(np.exp(1j * delta)))
    from .matching import HARD_ORIENTATION_LIMIT
    return delta <= HARD_ORIENTATION_LIMIT


def _retrieve(frame: QueryFrame, region: TileRegion,
              batch: QueryBatch) -> List[NnMatch]:
    """k nearest neighbors per keypoint across all tiles (batched)."""
    cfg = region.cfg
    n_kp = len(batch.desc)
    all_kp, all_lm, all_row, all_d, all_tile = [], [], [], [], []
    for ti, (table, index) in enumerate(zip(region.tables, region.indices)):
        if table.num_rows == 0:
            continue
        if cfg.index == "rg":
            kp, rows = _rg_collect(index, batch, frame, cfg)
        elif cfg.index == "imi":
            kp, rows = _imi_collect(index, batch, cfg)
        else:
            rows = np.tile(np.arange(table.num_rows), n_kp)
            kp = np.repeat(np.arange(n_kp), table.num_rows)
        if len(kp) == 0:
            continue
        mask = _hard_orientation_mask(table, batch, kp, rows)
        kp, rows = kp[mask], rows[mask]
        if len(kp) == 0:
            continue
        d = _batch_distances(table, batch, kp, rows)
        keep = _top_k_per_keypoint(kp, table.lm_ids[rows], rows, d, cfg.k)
        all_kp.append(kp[keep])
        all_lm.append(table.lm_ids[rows[keep]])
        all_row.append(rows[keep])
        all_d.append(d[keep])
        all_tile.append(np.full(len(keep), ti))
    if not all_kp:
        return []
    kp = np.concatenate(all_kp)
    lm = np.concatenate(all_lm)
    row = np.concatenate(all_row)
    d = np.concatenate(all_d)
    keep = _top_k_per_keypoint(kp, lm, row, d, cfg.k)
    return [NnMatch(int(kp[i]), int(lm[i]), int(row[i]), float(d[i]))
            for i in keep]


def _rg_collect(index, batch: QueryBatch, frame: QueryFrame,
                cfg: PipelineConfig):
    """Colliding (keypoint, row) pairs over all grids, deduplicated."""
    qhash = batch.hash_vectors
    n_kp = len(qhash)
    rng = None
    pairs_kp, pairs_row = [], []
    for g in range(index.num_grids):
        keys = np.floor((qhash @ index.rotations[g].T + index.shifts[g])
                        / index.cell_width).astype(np.int32)
        buckets = index.buckets[g]
        for i in range(n_kp):
            b = buckets.get(keys[i].tobytes())
            if b is None:
                continue
            if len(b) > cfg.rg_max_per_cell:
                if rng is None:
                    rng = np.random.default_rng(
                        derive_seed(cfg.seed, "rg-sample", frame.frame_id))
                b = rng.choice(b, size=cfg.rg_max_per_cell, replace=False)
            pairs_kp.append(np.full(len(b), i))
            pairs_row.append(b)
    if not pairs_kp:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    kp = np.concatenate(pairs_kp)
    row = np.concatenate(pairs_row)
    combo = np.unique(kp.astype(np.int64) * index.table.num_rows + row)
    return combo // index.table.num_rows, combo % index.table.num_rows


def _imi_collect(index, batch: QueryBatch, cfg: PipelineConfig):
    pairs_kp, pairs_row = [], []
    for i in range(len(batch.desc)):
        q = batch.one(i, cfg.augment)
        rows = []
        for w1, w2, _ in index.enumerate_words(q, cfg.imi_product_words):
            p = index.postings(w1, w2)
            if len(p):
                rows.append(p)
        if rows:
            r = np.concatenate(rows)
            pairs_kp.append(np.full(len(r), i))
            pairs_row.append(r)
    if not pairs_kp:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(pairs_kp), np.concatenate(pairs_row)


def _filter(matches: List[NnMatch], region: TileRegion) -> List[NnMatch]:
    cfg = region.cfg
    if cfg.filter_mode == "none":
        return matches
    if cfg.filter_mode == "absolute":
        lim = region.tau ** 2
        return [m for m in matches if m.distance_sq <= lim]
    raise ValueError(f"filter mode {cfg.filter_mode!r} not usable here")


def _correspondences(matches: Sequence[NnMatch], frame: QueryFrame,
                     bearings: np.ndarray,
                     region: TileRegion) -> List[Correspondence]:
    return [Correspondence(m.keypoint_id, frame.keypoints[m.keypoint_id],
                           bearings[m.keypoint_id], m.landmark_id,
                           region.position_of[m.landmark_id])
            for m in matches]


def _run_ransac(corrs, frame: QueryFrame, region: TileRegion,
                provenance: str) -> Optional[LocalizationResult]:
    cfg = region.cfg
    rcfg = replace(cfg.ransac,
                   seed=derive_seed(cfg.seed, "ransac", frame.frame_id))
    res = ransac(corrs, cfg.solver, frame.camera, rcfg,
                 gravity_cam=frame.gravity_cam)
    if res is not None:
        res.provenance = provenance
    return res


def _better(a: Optional[LocalizationResult],
            b: Optional[LocalizationResult]) -> Optional[LocalizationResult]:
    if a is None:
        return b
    if b is None:
        return a
    ka = (a.effective_inlier_count, a.inlier_ratio)
    kb = (b.effective_inlier_count, b.inlier_ratio)
    return a if ka >= kb else b


def _accepted(res: Optional[LocalizationResult], cfg: PipelineConfig) -> bool:
    return (res is not None
            and res.effective_inlier_count >= cfg.accept_effective_inliers
            and res.inlier_ratio >= cfg.accept_inlier_ratio)


def localize(frame: QueryFrame, region: TileRegion):
    """Returns a LocalizationResult or a LocalizeFailure with diagnostics."""
    cfg = region.cfg
    t0 = time.perf_counter()
    batch = _augmented_queries(frame, region)
    matches = _retrieve(frame, region, batch)
    filtered = _filter(matches, region)
    if cfg.use_covis and filtered:
        filtered = covis_filter(filtered, region.observers_of)
    bearings = frame.camera.bearing_from_pixel(frame.keypoints)

    best: Optional[LocalizationResult] = None
    tried = 0
    if filtered:
        if cfg.use_voting:
            positions = np.stack([region.position_of[m.landmark_id]
                                  for m in filtered])
            mb = bearings[[m.keypoint_id for m in filtered]]
            center = frame.gps_xy if frame.gps_xy is not None \
                else positions[:, :2].mean(axis=0)
            half = cfg.vote_half_extent or max(2.0 * frame.gps_sigma, 25.0)
            grid = grid_around(center, half, z_range=cfg.vote_z_range,
                               voxel=(cfg.vote_voxel,) * 3,
                               kappa_bins=cfg.vote_kappa_bins,
                               max_depth=cfg.vote_max_depth,
                               num_candidates=cfg.vote_candidates)
            result = vote_4d(positions, mb, frame.gravity_cam, grid)
            for cand in result.candidates:
                mask = matches_consistent_with(cand, positions, mb, grid,
                                               slack=cfg.vote_slack)
                subset = [m for m, keep in zip(filtered, mask) if keep]
                if len(subset) < max(2, cfg.ransac.min_inliers // 2):
                    continue
                tried += 1
                res = _run_ransac(_correspondences(subset, frame, bearings,
                                                   region),
                                  frame, region, "voting")
                best = _better(best, res)
        else:
            tried += 1
            best = _run_ransac(_correspondences(filtered, frame, bearings,
                                                region),
                               frame, region, "voting")

    if cfg.use_refinement and not _accepted(best, cfg) and filtered:
        best = _better(best, _refinement_stage(frame, region, batch,
                                               filtered, bearings))

    elapsed = (time.perf_counter() - t0) * 1000.0
    if best is None:
        return LocalizeFailure("no pose candidate survived", "stage2"
                               if cfg.use_refinement else "stage1",
                               len(matches), len(filtered), tried)
    best.timing_ms["total"] = elapsed
    return best


def _refinement_stage(frame: QueryFrame, region: TileRegion,
                      batch: QueryBatch, filtered: List[NnMatch],
                      bearings: np.ndarray) -> Optional[LocalizationResult]:
    """Binomial-relevance camera ranking, local re-matching, RANSAC."""
    cfg = region.cfg
    weight = None
    if frame.gps_xy is not None and frame.gps_sigma > 0:
        sig2 = (2.0 * frame.gps_sigma) ** 2

        def weight(cid: int) -> float:
            d = region.camera_positions[cid][:2] - frame.gps_xy
            return float(np.exp(-0.5 * (d @ d) / sig2))

    try:
        ranked = binomial_relevance(filtered, region.camera_ids,
                                    region.camera_descriptor_counts,
                                    region.observers_of, prior_weight=weight)
    except ValueError:
        return None
    best = None
    lim = region.tau ** 2
    for cand in ranked[:cfg.refine_locations]:
        per_tile: List[List[NnMatch]] = []
        for t, table in zip(region.tiles, region.tables):
            pos = np.flatnonzero(t.camera_ids == cand.camera_id)
            if not len(pos):
                continue
            rows = table.rows_of_landmarks(t.graph.camera_landmarks(int(pos[0])))
            per_tile.append(_dense_topk_matches(table, batch, rows,
                                                cfg.refine_k, lim))
        merged = [m for tile_matches in per_tile for m in tile_matches]
        if len(per_tile) > 1 and merged:
            # re-rank across tiles to keep only refine_k per keypoint
            kp = np.array([m.keypoint_id for m in merged])
            lm = np.array([m.landmark_id for m in merged])
            row = np.array([m.descriptor_ref for m in merged])
            d = np.array([m.distance_sq for m in merged])
            merged = [merged[i] for i in
                      _top_k_per_keypoint(kp, lm, row, d, cfg.refine_k)]
        if len(merged) < cfg.ransac.min_inliers:
            continue
        res = _run_ransac(_correspondences(merged, frame, bearings, region),
                          frame, region, "refinement")
        best = _better(best, res)
    return best
