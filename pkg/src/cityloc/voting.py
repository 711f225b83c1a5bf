"""4D pose voting for geometric outlier filtering.

With gravity known, a 2D-3D match constrains the camera pose to a
two-dimensional surface in (x, y, z, yaw) space: for every yaw the camera
rotation is fully determined, the match's world-frame bearing is fixed, and
the camera center must lie on the ray cast from the landmark opposite that
bearing.  Each match rasterizes its surface into a 4D accumulator (one vote
per voxel per match at most); local maxima are pose candidates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.ndimage import maximum_filter

from .geometry import GRAVITY_WORLD, Pose, rotation_aligning, yaw_rotation

DEFAULT_VOXEL = 1.0
DEFAULT_KAPPA_BINS = 36
DEFAULT_MAX_DEPTH = 150.0
DEFAULT_CANDIDATES = 10
_CHUNK = 128


@dataclass
class VoteGridConfig:
    origin: np.ndarray  # (3,) lower corner of the x,y,z box
    dims: tuple  # (nx, ny, nz)
    voxel: tuple = (DEFAULT_VOXEL, DEFAULT_VOXEL, DEFAULT_VOXEL)
    kappa_bins: int = DEFAULT_KAPPA_BINS
    depth_step: float = DEFAULT_VOXEL
    max_depth: float = DEFAULT_MAX_DEPTH
    num_candidates: int = DEFAULT_CANDIDATES

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if any(d <= 0 for d in self.dims) or self.kappa_bins <= 0:
            raise ValueError("grid dimensions must be positive")

    @property
    def shape(self):
        return (*self.dims, self.kappa_bins)

    def kappa_centers(self) -> np.ndarray:
        return (np.arange(self.kappa_bins) + 0.5) * 2 * np.pi / self.kappa_bins

    def voxel_center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx[:3], dtype=np.float64) + 0.5) \
            * np.asarray(self.voxel)


def grid_around(center_xy: np.ndarray, half_extent: float,
                z_range=(-5.0, 15.0), **kw) -> VoteGridConfig:
    """Grid covering a square around a position prior."""
    voxel = kw.pop("voxel", (DEFAULT_VOXEL,) * 3)
    nx = int(np.ceil(2 * half_extent / voxel[0]))
    ny = int(np.ceil(2 * half_extent / voxel[1]))
    nz = int(np.ceil((z_range[1] - z_range[0]) / voxel[2]))
    origin = np.array([center_xy[0] - half_extent, center_xy[1] - half_extent,
                       z_range[0]])
    return VoteGridConfig(origin, (nx, ny, nz), voxel=voxel, **kw)


@dataclass
class PoseCandidate:
    pose: Pose  # camera-to-world hypothesis (yaw+gravity rotation, voxel center)
    votes: int
    yaw: float
    voxel: tuple

    def __repr__(self):
        return f"PoseCandidate(votes={self.votes}, t={self.pose.t}, yaw={self.yaw:.2f})"


@dataclass
class VoteResult:
    counts: np.ndarray  # (nx, ny, nz, nk) int32
    candidates: List[PoseCandidate]
    config: VoteGridConfig


def vote_4d(landmark_positions: np.ndarray, bearings: np.ndarray,
            gravity_cam: np.ndarray, cfg: VoteGridConfig) -> VoteResult:
    """Cast the (yaw x depth) pose surface of every match into the grid.

    landmark_positions: (n, 3) world positions of the matched landmarks.
    bearings: (n, 3) unit rays in the camera frame for the matched keypoints.
    gravity_cam: unit gravity (down) direction in the camera frame.
    """
    p = np.atleast_2d(np.asarray(landmark_positions, dtype=np.float64))
    f = np.atleast_2d(np.asarray(bearings, dtype=np.float64))
    if len(p) != len(f):
        raise ValueError("positions / bearings length mismatch")
    nk = cfg.kappa_bins
    shape = cfg.shape
    n_vox = int(np.prod(shape))
    counts = np.zeros(n_vox, dtype=np.int32)
    if len(p) == 0:
        return VoteResult(counts.reshape(shape), [], cfg)

    r0 = rotation_aligning(np.asarray(gravity_cam, dtype=np.float64),
                           GRAVITY_WORLD)
    rz = np.stack([yaw_rotation(k) for k in cfg.kappa_centers()])  # (nk,3,3)
    f0 = f @ r0.T  # bearings in the gravity-rectified frame
    voxel = np.asarray(cfg.voxel)
    dims = np.asarray(cfg.dims)
    box_lo = cfg.origin
    box_hi = cfg.origin + dims * voxel

    for start in range(0, len(p), _CHUNK):
        pc = p[start:start + _CHUNK]  # (m, 3)
        fc = f0[start:start + _CHUNK]
        m = len(pc)
        d_world = np.einsum("kab,mb->kma", rz, fc)  # (nk, m, 3)
        # slab-clip each ray (center = landmark - s * bearing) to the grid
        # box so only depths that can land inside are sampled
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (pc[None, :, :] - box_lo) / d_world
            t2 = (pc[None, :, :] - box_hi) / d_world
        t_lo = np.nanmax(np.where(np.isfinite(np.minimum(t1, t2)),
                                  np.minimum(t1, t2), -np.inf), axis=-1)
        t_hi = np.nanmin(np.where(np.isfinite(np.maximum(t1, t2)),
                                  np.maximum(t1, t2), np.inf), axis=-1)
        s_lo = np.maximum(t_lo, cfg.depth_step)
        s_hi = np.minimum(t_hi, cfg.max_depth)
        lo_idx = np.ceil(s_lo / cfg.depth_step).astype(np.int64)
        hi_idx = np.floor(s_hi / cfg.depth_step).astype(np.int64)
        max_n = int(max(0, (hi_idx - lo_idx + 1).max()))
        if max_n == 0:
            continue
        steps = np.arange(max_n)
        depths = (lo_idx[..., None] + steps) * cfg.depth_step  # (nk, m, ns)
        in_range = lo_idx[..., None] + steps <= hi_idx[..., None]
        centers = pc[None, :, None, :] - depths[..., None] \
            * d_world[:, :, None, :]  # (nk, m, ns, 3)
        ijk = np.floor((centers - cfg.origin) / voxel).astype(np.int64)
        valid = np.all((ijk >= 0) & (ijk < dims), axis=-1) & in_range
        lin = ((ijk[..., 0] * dims[1] + ijk[..., 1]) * dims[2] + ijk[..., 2]) \
            * nk + np.arange(nk)[:, None, None]
        match_idx = np.broadcast_to(np.arange(m)[None, :, None], lin.shape)
        combo = match_idx[valid].astype(np.int64) * n_vox + lin[valid]
        if len(combo):
            uniq = np.unique(combo)
            np.add.at(counts, (uniq % n_vox).astype(np.int64), 1)

    grid = counts.reshape(shape)
    candidates = extract_candidates(grid, cfg, r0)
    return VoteResult(grid, candidates, cfg)


def extract_candidates(grid: np.ndarray, cfg: VoteGridConfig,
                       r0: np.ndarray) -> List[PoseCandidate]:
    """3x3x3x3 non-maximum suppression (yaw axis wraps), top-P by count."""
    if grid.max() == 0:
        return []
    local_max = maximum_filter(grid, size=3,
                               mode=("nearest", "nearest", "nearest", "wrap"))
    mask = (grid == local_max) & (grid > 0)
    idx = np.argwhere(mask)
    votes = grid[mask]
    order = np.lexsort((idx[:, 3], idx[:, 2], idx[:, 1], idx[:, 0], -votes))
    taken: List[np.ndarray] = []
    out: List[PoseCandidate] = []
    nk = cfg.kappa_bins
    for i in order:
        v = idx[i]
        # suppress plateau duplicates adjacent to an accepted candidate
        clash = False
        for t in taken:
            dk = abs(int(v[3]) - int(t[3]))
            dk = min(dk, nk - dk)
            if np.all(np.abs(v[:3] - t[:3]) <= 1) and dk <= 1:
                clash = True
                break
        if clash:
            continue
        taken.append(v)
        kappa = (v[3] + 0.5) * 2 * np.pi / nk
        pose = Pose.from_rt(yaw_rotation(kappa) @ r0, cfg.voxel_center(v))
        out.append(PoseCandidate(pose, int(grid[tuple(v)]), float(kappa),
                                 tuple(int(x) for x in v)))
        if len(out) >= cfg.num_candidates:
            break
    return out


def voting_yaw(pose: Pose, gravity_cam: np.ndarray) -> float:
    """The kappa coordinate of a camera-to-world pose in the voting
    parameterization (yaw relative to the gravity-alignment rotation)."""
    r0 = rotation_aligning(np.asarray(gravity_cam, dtype=np.float64),
                           GRAVITY_WORLD)
    rz = pose.r @ r0.T
    return float(np.arctan2(rz[1, 0], rz[0, 0]) % (2 * np.pi))


def matches_consistent_with(candidate: PoseCandidate,
                            landmark_positions: np.ndarray,
                            bearings: np.ndarray,
                            cfg: VoteGridConfig,
                            slack: float = 2.0) -> np.ndarray:
    """Mask of matches whose voting surface passes near the candidate voxel.

    A match supports the candidate when, at the candidate yaw, the ray from
    its landmark opposite the world bearing passes within ``slack`` voxel
    diagonals of the candidate position at some admissible depth.  The
    tolerance widens with depth by half a yaw bin: votes are rasterized at
    bin-center yaw, so a match whose true yaw sits at the bin edge lands up
    to ``depth * bin_width / 2`` away.
    """
    p = np.atleast_2d(landmark_positions)
    f = np.atleast_2d(bearings)
    d_world = f @ candidate.pose.r.T
    rel = p - candidate.pose.t
    s = np.einsum("ij,ij->i", rel, d_world)  # depth of closest approach
    closest = rel - s[:, None] * d_world
    half_bin = np.pi / cfg.kappa_bins
    tol = slack * np.linalg.norm(cfg.voxel) + np.maximum(s, 0.0) * half_bin
    return (s > 0) & (s <= cfg.max_depth + tol) \
        & (np.linalg.norm(closest, axis=1) <= tol)
