"""Discard-based sliding-window bundle adjustment baseline.

The comparison estimator: a window of the last N body poses optimized by
Gauss-Newton over (a) IMU dead-reckoned relative-pose constraints between
consecutive frames, (b) reprojection of fixed global map landmarks, and
(c) reprojection of locally triangulated track landmarks (re-triangulated
before each step, held fixed during the iterations).  When the window
slides, the oldest pose and every constraint touching it are discarded --
no marginalization -- which is what makes this baseline jumpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import (
    DegenerateGeometry,
    Pose,
    compose,
    invert,
    quat_conj,
    quat_from_rotvec,
    quat_mul,
    quat_to_matrix,
    rotvec_from_quat,
    triangulate,
)
from .fusion_sim import FusionEstimate, FusionSim, R_IC
from .scene_sim import GRAVITY_ACCEL


@dataclass
class RelPoseConstraint:
    i: int  # older window slot
    j: int  # newer window slot
    delta: Pose  # T_i^-1 o T_j predicted by dead reckoning
    weight_rot: float = 500.0
    weight_pos: float = 500.0


@dataclass
class PreintConstraint:
    """IMU preintegration between consecutive window frames.

    Raw body-frame integrals are state-independent; the residual predicts
    pose j from pose i, gravity and the velocity of frame i, which is taken
    from the pose difference to its predecessor (or a frozen value when the
    predecessor has been discarded)."""

    i_prev: int  # slot of i's predecessor, -1 when discarded
    i: int
    j: int
    dt_prev: float
    dt: float
    delta_q: np.ndarray  # body-frame rotation increment (quat)
    alpha: np.ndarray  # double integral of body acceleration, frame i
    frozen_velocity: Optional[np.ndarray]  # used when i_prev == -1
    weight_rot: float = 500.0
    weight_pos: float = 500.0


def preintegrate(samples, t0: float) -> Tuple[np.ndarray, np.ndarray, float]:
    """Body-frame preintegration: (delta_q, alpha, dt)."""
    q_rel = np.array([0.0, 0.0, 0.0, 1.0])
    alpha = np.zeros(3)
    beta = np.zeros(3)
    t = t0
    for s in samples:
        dt = s.t - t
        if dt <= 0:
            continue
        q_half = quat_mul(q_rel, quat_from_rotvec(s.gyro * dt * 0.5))
        a_rel = quat_to_matrix(q_half) @ s.accel
        alpha = alpha + beta * dt + 0.5 * a_rel * dt * dt
        beta = beta + a_rel * dt
        q_rel = quat_mul(q_rel, quat_from_rotvec(s.gyro * dt))
        t = s.t
    return q_rel / np.linalg.norm(q_rel), alpha, t - t0


@dataclass
class ReprojBlock:
    """All reprojection constraints of one window slot, batched."""

    frame: int  # window slot
    landmarks: np.ndarray  # (m, 3) fixed positions
    z: np.ndarray  # (m, 2) normalized observations
    weights: np.ndarray  # (m,)
    robust: bool = True  # Huber-weighted (off for trusted global anchors)


@dataclass
class BaConfig:
    window_size: int = 5
    iterations: int = 5
    cam_extrinsics: Pose = field(default_factory=lambda: Pose.from_rt(
        R_IC, np.zeros(3)))
    pixel_sigma: float = 1.0 / 500.0
    odo_rot_sigma: float = 2e-3
    # the position prediction inherits the differentiated-pose velocity
    # error, so it is far weaker than the gyro-driven rotation prediction
    odo_pos_sigma: float = 0.03
    max_tracks: int = 40
    local_track_weight: float = 0.15  # relative to global match weight
    min_triangulation_baseline: float = 0.25
    max_landmark_depth: float = 60.0


_GRAVITY = np.array([0.0, 0.0, -GRAVITY_ACCEL])
_HUBER_KNEE = 3.0
_MAX_STEP_NORM = 2.0


def _residuals(poses: List[Pose], rel, blocks: List[ReprojBlock],
               cam_ext: Pose) -> np.ndarray:
    out = []
    for c in rel:
        if isinstance(c, PreintConstraint):
            pi = poses[c.i]
            if c.i_prev >= 0:
                v_i = (pi.t - poses[c.i_prev].t) / c.dt_prev
            else:
                v_i = c.frozen_velocity
            r_i = quat_to_matrix(pi.q)
            p_pred = pi.t + v_i * c.dt + 0.5 * _GRAVITY * c.dt ** 2 \
                + r_i @ c.alpha
            q_pred = quat_mul(pi.q, c.delta_q)
            err_r = rotvec_from_quat(quat_mul(q_pred, quat_conj(poses[c.j].q)))
            out.append(c.weight_rot * err_r)
            out.append(c.weight_pos * (p_pred - poses[c.j].t))
        else:
            pred = compose(poses[c.i], c.delta)
            err_r = rotvec_from_quat(quat_mul(pred.q, quat_conj(poses[c.j].q)))
            out.append(c.weight_rot * err_r)
            out.append(c.weight_pos * (pred.t - poses[c.j].t))
    for b in blocks:
        cam = compose(poses[b.frame], cam_ext)
        inv = invert(cam)
        pc = b.landmarks @ inv.r.T + inv.t
        z = np.where(pc[:, 2] > 1e-6, pc[:, 2], 1.0)
        pred = pc[:, :2] / z[:, None]
        r = (b.z - pred) * b.weights[:, None]
        r[pc[:, 2] <= 1e-6] = 10.0
        if b.robust:
            # Huber: downweight gross reprojection outliers (3-sigma knee
            # in whitened units)
            e = np.linalg.norm(r, axis=1)
            scale = np.sqrt(np.minimum(1.0, _HUBER_KNEE / np.maximum(e, 1e-12)))
            r = r * scale[:, None]
        out.append(r.ravel())
    return np.concatenate(out) if out else np.zeros(0)


def _perturb(poses: List[Pose], dx: np.ndarray) -> List[Pose]:
    out = []
    for i, p in enumerate(poses):
        d = dx[6 * i:6 * i + 6]
        out.append(Pose(quat_mul(quat_from_rotvec(d[:3]), p.q), p.t + d[3:]))
    return out


def ba_baseline_step(poses: List[Pose], rel: List[RelPoseConstraint],
                     blocks: List[ReprojBlock], iterations: int,
                     cam_ext: Optional[Pose] = None,
                     fixed: Optional[List[int]] = None):
    """Gauss-Newton over the window poses; returns (poses, converged).

    Numeric Jacobians (central differences), step halving; accepted steps
    never increase the cost.  ``fixed`` lists window slots held constant.
    """
    cam_ext = cam_ext if cam_ext is not None else Pose.from_rt(R_IC, np.zeros(3))
    fixed = set(fixed or [])
    n = len(poses)
    free = [i for i in range(n) if i not in fixed]
    if not free:
        return list(poses), True
    poses = list(poses)
    eps = 1e-6
    converged = False
    for _ in range(iterations):
        r0 = _residuals(poses, rel, blocks, cam_ext)
        if not len(r0):
            converged = True
            break
        cost0 = float(r0 @ r0)
        jac = np.zeros((len(r0), 6 * len(free)))
        for fi, slot in enumerate(free):
            for a in range(6):
                dx = np.zeros(6 * n)
                dx[6 * slot + a] = eps
                rp = _residuals(_perturb(poses, dx), rel, blocks, cam_ext)
                dx[6 * slot + a] = -eps
                rm = _residuals(_perturb(poses, dx), rel, blocks, cam_ext)
                jac[:, 6 * fi + a] = (rp - rm) / (2 * eps)
        h = jac.T @ jac + 1e-9 * np.eye(6 * len(free))
        g = jac.T @ r0
        try:
            step = np.linalg.solve(h, -g)
        except np.linalg.LinAlgError:
            break
        norm = np.linalg.norm(step)
        if norm > _MAX_STEP_NORM:
            step *= _MAX_STEP_NORM / norm
        scale = 1.0
        improved = False
        for _ in range(6):
            dx = np.zeros(6 * n)
            for fi, slot in enumerate(free):
                dx[6 * slot:6 * slot + 6] = scale * step[6 * fi:6 * fi + 6]
            cand = _perturb(poses, dx)
            rc = _residuals(cand, rel, blocks, cam_ext)
            if float(rc @ rc) < cost0:
                poses = cand
                improved = True
                break
            scale *= 0.5
        if not improved:
            converged = True
            break
        if np.linalg.norm(step) * scale < 1e-10:
            converged = True
            break
    return poses, converged


class _DeadReckoner:
    """Strapdown mechanization providing relative poses between frames."""

    def __init__(self, pose0: Pose, v0: np.ndarray):
        self.q = pose0.q.copy()
        self.p = pose0.t.copy()
        self.v = np.asarray(v0, dtype=float).copy()
        self.t = 0.0

    def advance(self, samples) -> Pose:
        g = np.array([0.0, 0.0, -GRAVITY_ACCEL])
        for s in samples:
            dt = s.t - self.t
            if dt <= 0:
                continue
            q_half = quat_mul(self.q, quat_from_rotvec(s.gyro * dt * 0.5))
            a_w = quat_to_matrix(q_half) @ s.accel + g
            self.p = self.p + self.v * dt + 0.5 * a_w * dt * dt
            self.v = self.v + a_w * dt
            self.q = quat_mul(self.q, quat_from_rotvec(s.gyro * dt))
            self.t = s.t
        return Pose(self.q / np.linalg.norm(self.q), self.p.copy())


def run_ba(sim: FusionSim, cfg: Optional[BaConfig] = None
           ) -> List[FusionEstimate]:
    """Drive the discard-based sliding-window BA over simulated records.

    Per frame: preintegrate the IMU batch, slide the window (dropping the
    oldest pose with all of its constraints), then run the configured
    number of Gauss-Newton iterations, re-triangulating local-track
    landmarks from the current pose estimates before each iteration.
    """
    cfg = cfg if cfg is not None else BaConfig(
        pixel_sigma=sim.config.pixel_sigma)
    window: List[Tuple[int, Pose]] = []  # (frame_id, pose estimate)
    preints: Dict[int, Tuple] = {}  # frame -> (delta_q, alpha, dt)
    frame_time: Dict[int, float] = {}
    frame_globals: Dict[int, List[dict]] = {}
    track_hist: Dict[int, List[Tuple[int, np.ndarray]]] = {}
    local_map: Dict[int, np.ndarray] = {}  # PTAM-like fixed local points
    frozen_vel = np.asarray(sim.init_velocity, dtype=float)
    out = []
    w_px = 1.0 / cfg.pixel_sigma
    w_rot = 1.0 / cfg.odo_rot_sigma
    w_pos = 1.0 / cfg.odo_pos_sigma
    t_prev = 0.0
    for rec in sim.records:
        delta_q, alpha, dt = preintegrate(rec.imu, t_prev)
        preints[rec.frame_id] = (delta_q, alpha, dt)
        frame_time[rec.frame_id] = rec.t
        t_prev = rec.t
        for tid, z in rec.track_obs:
            track_hist.setdefault(tid, []).append((rec.frame_id, z))
        if rec.global_matches:
            frame_globals[rec.frame_id] = rec.global_matches

        if window:
            # initial guess: propagate the last estimate through the preint
            last_fid, last_pose = window[-1]
            if len(window) >= 2:
                v = (last_pose.t - window[-2][1].t) \
                    / (frame_time[last_fid] - frame_time[window[-2][0]])
            else:
                v = frozen_vel
            r_i = quat_to_matrix(last_pose.q)
            p_new = last_pose.t + v * dt + 0.5 * _GRAVITY * dt * dt \
                + r_i @ alpha
            q_new = quat_mul(last_pose.q, delta_q)
            window.append((rec.frame_id, Pose(q_new / np.linalg.norm(q_new),
                                              p_new)))
        else:
            window.append((rec.frame_id, sim.init_pose))
        if len(window) > cfg.window_size:
            dropped, dropped_pose = window.pop(0)
            # discard semantics: constraints of the dropped frame vanish;
            # only its velocity survives, frozen for the new oldest pair
            new_first = window[0]
            frozen_vel = (new_first[1].t - dropped_pose.t) \
                / (frame_time[new_first[0]] - frame_time[dropped])
            frame_globals.pop(dropped, None)
            preints.pop(dropped, None)
            for tid in list(track_hist):
                track_hist[tid] = [(f, z) for f, z in track_hist[tid]
                                   if f > dropped]
                if not track_hist[tid]:
                    del track_hist[tid]
                    local_map.pop(tid, None)

        slots = {fid: i for i, (fid, _) in enumerate(window)}
        poses = [p for _, p in window]

        # triangulate newly mature tracks once; the local map stays fixed.
        # quality gates keep badly conditioned points out (small baseline
        # blows up the whole window otherwise)
        for tid, obs in track_hist.items():
            if tid in local_map or len(obs) < 3:
                continue
            in_win = [(fid, z) for fid, z in obs if fid in slots]
            if len(in_win) < 3:
                continue
            cams = []
            rays = []
            for fid, z in in_win:
                cam = compose(poses[slots[fid]], cfg.cam_extrinsics)
                v = np.array([z[0], z[1], 1.0])
                cams.append(cam)
                rays.append((cam, v / np.linalg.norm(v)))
            centers = np.stack([c.t for c in cams])
            baseline = np.linalg.norm(centers - centers.mean(axis=0),
                                      axis=1).max()
            if baseline < cfg.min_triangulation_baseline:
                continue
            try:
                lm = triangulate(rays)
            except DegenerateGeometry:
                continue
            ok = True
            for (fid, z), cam in zip(in_win, cams):
                pc = invert(cam).apply(lm)
                if pc[2] < 1.0 or pc[2] > cfg.max_landmark_depth:
                    ok = False
                    break
                if np.linalg.norm(z - pc[:2] / pc[2]) > 6 * cfg.pixel_sigma:
                    ok = False
                    break
            if ok:
                local_map[tid] = lm

        rel_cons = []
        for a in range(len(window) - 1):
            fj = window[a + 1][0]
            dq, al, d_t = preints[fj]
            dt_prev = (frame_time[window[a][0]]
                       - frame_time[window[a - 1][0]]) if a >= 1 else 1.0
            rel_cons.append(PreintConstraint(
                a - 1 if a >= 1 else -1, a, a + 1, dt_prev, d_t, dq, al,
                frozen_vel if a == 0 else None,
                weight_rot=w_rot, weight_pos=w_pos))
        anchor_slots: Dict[int, List] = {}
        for fid, gms in frame_globals.items():
            if fid not in slots:
                continue
            for gm in gms:
                anchor_slots.setdefault(slots[fid], []).append(
                    (np.asarray(gm["landmark"]), np.asarray(gm["z"]), w_px))
        map_slots: Dict[int, List] = {}
        used = 0
        for tid in sorted(track_hist):
            if tid not in local_map:
                continue
            if used >= cfg.max_tracks:
                break
            used += 1
            for fid, z in track_hist[tid]:
                if fid in slots:
                    map_slots.setdefault(slots[fid], []).append(
                        (local_map[tid], z, cfg.local_track_weight * w_px))
        blocks = [ReprojBlock(s,
                              np.stack([e[0] for e in entries]),
                              np.stack([e[1] for e in entries]),
                              np.array([e[2] for e in entries]),
                              robust=False)
                  for s, entries in anchor_slots.items()]
        blocks += [ReprojBlock(s,
                               np.stack([e[0] for e in entries]),
                               np.stack([e[1] for e in entries]),
                               np.array([e[2] for e in entries]))
                   for s, entries in map_slots.items()]

        # anchored or map-supported windows are fully free; a window with
        # only the relative chain keeps its oldest pose pinned
        fixed = [] if (anchor_slots or map_slots) else [0]
        poses, _ = ba_baseline_step(poses, rel_cons, blocks, cfg.iterations,
                                    cam_ext=cfg.cam_extrinsics, fixed=fixed)
        window = [(fid, p) for (fid, _), p in zip(window, poses)]
        out.append(FusionEstimate(rec.t, window[-1][1], rec.true_body_pose))
    return out
