"""Robust pose estimation: randomized-verification RANSAC around the minimal
solvers, Gauss-Newton PnP refinement on all inliers, and the spread-rewarding
effective inlier count."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .geometry import Camera, DegenerateGeometry, Pose, invert, quat_from_rotvec, quat_mul, skew
from .solvers import p2p_gravity, p3p

DEFAULT_INLIER_THRESHOLD_PX = 4.0
DEFAULT_EFFECTIVE_CELL_PX = 40.0


@dataclass
class Correspondence:
    keypoint_id: int
    pixel: np.ndarray  # (2,) observed keypoint
    bearing: np.ndarray  # (3,) unit ray, camera frame
    landmark_id: int
    point: np.ndarray  # (3,) world position


@dataclass
class RansacConfig:
    inlier_threshold_px: float = DEFAULT_INLIER_THRESHOLD_PX
    max_iterations: int = 500
    confidence: float = 0.999
    verify_subset: int = 20  # randomized pre-verification sample size
    min_inliers: int = 12
    refine_iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier threshold must be positive")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")


@dataclass
class LocalizationResult:
    pose: Pose  # camera-to-world, global frame
    inliers: List[Correspondence]
    inlier_ratio: float
    effective_inlier_count: int
    mean_residual_px: float
    provenance: str = "voting"  # which pipeline stage produced it
    num_matches: int = 0
    timing_ms: dict = field(default_factory=dict)


def reprojection_residuals(pose: Pose, cam: Camera, points: np.ndarray,
                           pixels: np.ndarray):
    """Per-point pixel residual norms; behind-camera points get +inf."""
    inv = invert(pose)
    pc = points @ inv.r.T + inv.t
    z = pc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    proj = np.stack([cam.fx * pc[:, 0] / zs + cam.cx,
                     cam.fy * pc[:, 1] / zs + cam.cy], axis=1)
    r = np.linalg.norm(proj - pixels, axis=1)
    return np.where(ok, r, np.inf)


def effective_inlier_count(pixels: np.ndarray,
                           cell_px: float = DEFAULT_EFFECTIVE_CELL_PX) -> int:
    """Number of distinct image-grid cells containing at least one inlier."""
    if len(pixels) == 0:
        return 0
    cells = np.floor(np.asarray(pixels) / cell_px).astype(np.int64)
    return len(np.unique(cells, axis=0))


def refine_pnp(pose: Pose, cam: Camera, points: np.ndarray,
               pixels: np.ndarray, iterations: int = 10) -> Pose:
    """Gauss-Newton on the reprojection error over all given points."""
    def cost(p):
        r = reprojection_residuals(p, cam, points, pixels)
        r = r[np.isfinite(r)]
        return float(np.sum(r * r)) if len(r) else np.inf

    cur = pose
    cur_cost = cost(cur)
    for _ in range(iterations):
        inv = invert(cur)
        pc = points @ inv.r.T + inv.t
        z = pc[:, 2]
        ok = z > 1e-9
        if not ok.any():
            break
        idx = np.flatnonzero(ok)
        rt = cur.r.T
        rel = points[idx] - cur.t  # (n, 3)
        sk = np.zeros((len(idx), 3, 3))
        sk[:, 0, 1] = -rel[:, 2]
        sk[:, 0, 2] = rel[:, 1]
        sk[:, 1, 0] = rel[:, 2]
        sk[:, 1, 2] = -rel[:, 0]
        sk[:, 2, 0] = -rel[:, 1]
        sk[:, 2, 1] = rel[:, 0]
        d_pc = np.concatenate([np.einsum("ab,nbc->nac", rt, sk),
                               np.tile(-rt, (len(idx), 1, 1))], axis=2)  # (n,3,6)
        x, y, zi = pc[idx, 0], pc[idx, 1], pc[idx, 2]
        j_px = np.zeros((len(idx), 2, 3))
        j_px[:, 0, 0] = cam.fx / zi
        j_px[:, 0, 2] = -cam.fx * x / zi ** 2
        j_px[:, 1, 1] = cam.fy / zi
        j_px[:, 1, 2] = -cam.fy * y / zi ** 2
        pred = np.stack([cam.fx * x / zi + cam.cx,
                         cam.fy * y / zi + cam.cy], axis=1)
        j = np.einsum("nab,nbc->nac", j_px, d_pc).reshape(-1, 6)
        r = (pixels[idx] - pred).reshape(-1)
        h = j.T @ j + 1e-9 * np.eye(6)
        try:
            delta = np.linalg.solve(h, j.T @ r)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        for _ in range(6):
            dq = quat_from_rotvec(step * delta[:3])
            cand = Pose(quat_mul(dq, cur.q), cur.t + step * delta[3:])
            c = cost(cand)
            if c < cur_cost:
                cur, cur_cost = cand, c
                break
            step *= 0.5
        else:
            break
        if np.linalg.norm(delta) * step < 1e-12:
            break
    return cur


def _score(pose, cam, points, pixels, thresh):
    r = reprojection_residuals(pose, cam, points, pixels)
    mask = r <= thresh
    n = int(np.count_nonzero(mask))
    mean = float(r[mask].mean()) if n else np.inf
    return mask, n, mean


def ransac(corrs: Sequence[Correspondence], solver: str, cam: Camera,
           cfg: RansacConfig,
           gravity_cam: Optional[np.ndarray] = None
           ) -> Optional[LocalizationResult]:
    """Randomized-verification RANSAC over a minimal solver.

    ``solver`` is "p2p" (needs gravity_cam) or "p3p".  Hypotheses are first
    scored on a small random subset and fully verified only when the subset
    inlier fraction reaches half of the best-so-far; the winner is refined
    with PnP on all its inliers.  Returns None when no model reaches
    ``cfg.min_inliers``.
    """
    if solver == "p2p":
        if gravity_cam is None:
            raise ValueError("p2p solver needs the gravity direction")
        sample_size = 2
    elif solver == "p3p":
        sample_size = 3
    else:
        raise ValueError(f"unknown solver {solver!r}")
    n = len(corrs)
    if n < sample_size:
        return None
    points = np.stack([c.point for c in corrs])
    pixels = np.stack([c.pixel for c in corrs])
    bearings = np.stack([c.bearing for c in corrs])
    rng = np.random.default_rng(cfg.seed)
    thresh = cfg.inlier_threshold_px
    r0 = None
    if solver == "p2p":
        from .geometry import GRAVITY_WORLD, rotation_aligning
        r0 = rotation_aligning(np.asarray(gravity_cam, dtype=np.float64),
                               GRAVITY_WORLD)

    best_mask, best_n, best_mean, best_pose = None, 0, np.inf, None
    it = 0
    max_it = cfg.max_iterations
    subset = None
    if n > cfg.verify_subset:
        subset = rng.choice(n, size=cfg.verify_subset, replace=False)
    while it < max_it:
        it += 1
        pick = rng.choice(n, size=sample_size, replace=False)
        try:
            if solver == "p2p":
                hyps = p2p_gravity(points[pick], bearings[pick], gravity_cam,
                                   r0=r0)
            else:
                hyps = p3p(points[pick], bearings[pick])
        except DegenerateGeometry:
            continue
        for pose in hyps:
            if subset is not None and best_n > 0:
                r = reprojection_residuals(pose, cam, points[subset],
                                           pixels[subset])
                frac = np.count_nonzero(r <= thresh) / len(subset)
                if frac < 0.5 * (best_n / n):
                    continue
            mask, cnt, mean = _score(pose, cam, points, pixels, thresh)
            if cnt > best_n or (cnt == best_n and mean < best_mean):
                best_mask, best_n, best_mean, best_pose = mask, cnt, mean, pose
                w = best_n / n
                if w > 0:
                    denom = np.log(max(1e-12, 1.0 - w ** sample_size))
                    if denom < 0:
                        needed = int(np.ceil(np.log(1.0 - cfg.confidence)
                                             / denom))
                        max_it = min(cfg.max_iterations, max(needed, 1))
    if best_pose is None or best_n < cfg.min_inliers:
        return None

    refined = refine_pnp(best_pose, cam, points[best_mask], pixels[best_mask],
                         cfg.refine_iterations)
    r_mask, r_n, r_mean = _score(refined, cam, points, pixels, thresh)
    if (r_n, -r_mean) >= (best_n, -best_mean):
        best_pose, best_mask, best_n, best_mean = refined, r_mask, r_n, r_mean
    if best_n < cfg.min_inliers:
        return None
    inliers = [c for c, m in zip(corrs, best_mask) if m]
    eff = effective_inlier_count(pixels[best_mask])
    return LocalizationResult(best_pose, inliers, best_n / n, eff, best_mean,
                              num_matches=n)
