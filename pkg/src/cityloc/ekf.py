"""Sliding-window visual-inertial EKF with global 2D-3D match updates.

State: the evolving IMU state (attitude, position, velocity, gyro and
accelerometer biases), the local-to-global alignment transform, and a
sliding window of cloned camera poses.  Local feature tracks update the
filter through landmark-marginalized (nullspace-projected) constraints;
global 2D-3D matches update it against fixed map landmarks through the
alignment chain, with Mahalanobis gating, measurement-noise inflation (the
map stores no landmark covariance) and QR measurement compression.

Error state layout (left-multiplicative rotation errors):

    [ dth_I dp_I dv dbg dba | dth_A dp_A | dth_C1 dp_C1 ... ]
      0         ...      15   15     21   21 + 6i

All rotations are scalar-last unit quaternions; poses map source-frame
points into the named target frame (T_LI: IMU -> local, T_LC: camera ->
local, T_GL: local -> global).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import chi2

from .geometry import (
    Pose,
    compose,
    invert,
    quat_from_rotvec,
    quat_mul,
    quat_to_matrix,
    skew,
    triangulate,
    DegenerateGeometry,
)
from .scene_sim import GRAVITY_ACCEL, ImuSample

GRAVITY_VEC = np.array([0.0, 0.0, -GRAVITY_ACCEL])

EVOLVING_DIM = 15
ALIGN_OFF = 15
CLONE_OFF = 21
CLONE_DIM = 6


@dataclass
class FilterConfig:
    sigma_gyro: float = 1e-3  # rad/s/sqrt(Hz)
    sigma_accel: float = 8e-3  # m/s^2/sqrt(Hz)
    sigma_gyro_bias: float = 1e-5
    sigma_accel_bias: float = 1e-4
    pixel_sigma: float = 1.0 / 500.0  # normalized-coordinate noise
    noise_inflation: float = 2.0  # global updates absorb map error
    chi2_prob: float = 0.99
    window_size: int = 10
    cam_extrinsics: Pose = field(default_factory=Pose.identity)  # T_IC
    init_sigma_pos: float = 1e-3
    init_sigma_rot: float = 1e-3
    init_sigma_vel: float = 1e-2
    init_sigma_bg: float = 1e-3
    init_sigma_ba: float = 1e-2
    align_sigma_pos: float = 1.0
    align_sigma_rot: float = 0.1


@dataclass
class GlobalMatchUpdate:
    camera_key: int  # which window clone observed it
    landmark: np.ndarray  # (3,) global-frame position (fixed, no covariance)
    z: np.ndarray  # (2,) normalized image observation
    sigma: float  # per-axis noise, already inflated


@dataclass
class Track:
    track_id: int
    observations: List[Tuple[int, np.ndarray]]  # (camera_key, z (2,))


@dataclass
class UpdateReport:
    accepted: int = 0
    gated: int = 0
    applied: bool = False
    rejected_not_psd: bool = False


class FilterState:
    def __init__(self, cfg: FilterConfig, t0: float = 0.0,
                 pose0: Optional[Pose] = None,
                 velocity0: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.t = t0
        p0 = pose0 if pose0 is not None else Pose.identity()
        self.q = p0.q.copy()  # T_LI rotation
        self.p = p0.t.copy()
        self.v = np.zeros(3) if velocity0 is None else np.asarray(velocity0,
                                                                  float)
        self.bg = np.zeros(3)
        self.ba = np.zeros(3)
        self.align = Pose.identity()  # T_GL
        self.aligned = False
        self.clone_keys: List[int] = []
        self.clones: Dict[int, Pose] = {}  # T_LC per key
        d = CLONE_OFF
        self.cov = np.zeros((d, d))
        self.cov[0:3, 0:3] = np.eye(3) * cfg.init_sigma_rot ** 2
        self.cov[3:6, 3:6] = np.eye(3) * cfg.init_sigma_pos ** 2
        self.cov[6:9, 6:9] = np.eye(3) * cfg.init_sigma_vel ** 2
        self.cov[9:12, 9:12] = np.eye(3) * cfg.init_sigma_bg ** 2
        self.cov[12:15, 12:15] = np.eye(3) * cfg.init_sigma_ba ** 2
        # alignment uncertainty stays tiny until align_initial runs
        self.cov[15:18, 15:18] = np.eye(3) * 1e-12
        self.cov[18:21, 18:21] = np.eye(3) * 1e-12

    @property
    def dim(self) -> int:
        return CLONE_OFF + CLONE_DIM * len(self.clone_keys)

    @property
    def imu_pose(self) -> Pose:
        return Pose(self.q, self.p)

    def camera_pose_local(self) -> Pose:
        return compose(self.imu_pose, self.cfg.cam_extrinsics)

    def global_pose(self) -> Pose:
        """Current platform pose in the global frame (T_GI)."""
        return compose(self.align, self.imu_pose)

    def clone_slot(self, key: int) -> int:
        return CLONE_OFF + CLONE_DIM * self.clone_keys.index(key)

    def symmetrize(self):
        self.cov = 0.5 * (self.cov + self.cov.T)
        w, v = np.linalg.eigh(self.cov)
        if w.min() < -1e-9:
            self.cov = (v * np.maximum(w, 0.0)) @ v.T
            self.cov = 0.5 * (self.cov + self.cov.T)

    def apply_correction(self, dx: np.ndarray):
        self.q = quat_mul(quat_from_rotvec(dx[0:3]), self.q)
        self.p = self.p + dx[3:6]
        self.v = self.v + dx[6:9]
        self.bg = self.bg + dx[9:12]
        self.ba = self.ba + dx[12:15]
        self.align = Pose(quat_mul(quat_from_rotvec(dx[15:18]), self.align.q),
                          self.align.t + dx[18:21])
        for i, key in enumerate(self.clone_keys):
            s = CLONE_OFF + CLONE_DIM * i
            c = self.clones[key]
            self.clones[key] = Pose(
                quat_mul(quat_from_rotvec(dx[s:s + 3]), c.q),
                c.t + dx[s + 3:s + 6])


def _propagate_step(state: FilterState, s: ImuSample) -> np.ndarray:
    """One strapdown + covariance step; returns the evolving transition."""
    dt = s.t - state.t
    w = s.gyro - state.bg
    a = s.accel - state.ba
    # mean: midpoint-rotation strapdown
    q_half = quat_mul(state.q, quat_from_rotvec(w * dt * 0.5))
    r_half = quat_to_matrix(q_half)
    a_l = r_half @ a + GRAVITY_VEC
    p_new = state.p + state.v * dt + 0.5 * a_l * dt * dt
    v_new = state.v + a_l * dt
    q_new = quat_mul(state.q, quat_from_rotvec(w * dt))

    # error transition linearized at the midpoint attitude
    f = np.zeros((EVOLVING_DIM, EVOLVING_DIM))
    f[0:3, 9:12] = -r_half
    f[3:6, 6:9] = np.eye(3)
    f[6:9, 0:3] = -skew(r_half @ a)
    f[6:9, 12:15] = -r_half
    phi = np.eye(EVOLVING_DIM) + f * dt + 0.5 * (f @ f) * dt * dt

    cfg = state.cfg
    g = np.zeros((EVOLVING_DIM, 12))
    g[0:3, 0:3] = -r_half
    g[6:9, 3:6] = -r_half
    g[9:12, 6:9] = np.eye(3)
    g[12:15, 9:12] = np.eye(3)
    qc = np.zeros(12)
    qc[0:3] = cfg.sigma_gyro ** 2
    qc[3:6] = cfg.sigma_accel ** 2
    qc[6:9] = cfg.sigma_gyro_bias ** 2
    qc[9:12] = cfg.sigma_accel_bias ** 2
    qd = phi @ (g * qc) @ g.T @ phi.T * dt

    pe = state.cov[:EVOLVING_DIM, :EVOLVING_DIM]
    px = state.cov[:EVOLVING_DIM, EVOLVING_DIM:]
    state.cov[:EVOLVING_DIM, :EVOLVING_DIM] = phi @ pe @ phi.T + qd
    state.cov[:EVOLVING_DIM, EVOLVING_DIM:] = phi @ px
    state.cov[EVOLVING_DIM:, :EVOLVING_DIM] = (phi @ px).T

    state.q, state.p, state.v = q_new, p_new, v_new
    state.t = s.t
    return phi


def propagate(state: FilterState, samples: Sequence[ImuSample]) -> FilterState:
    """Strapdown mean propagation with first-order covariance transition.

    Mutates and returns ``state``.  Raises ValueError on a timestamp
    regression.
    """
    propagate_with_transition(state, samples)
    return state


def propagate_with_transition(state: FilterState,
                               samples: Sequence[ImuSample]):
    """Like propagate, additionally returning the accumulated evolving-state
    transition matrix (finite-difference checks rely on it)."""
    phi_total = np.eye(EVOLVING_DIM)
    for s in samples:
        if s.t < state.t:
            raise ValueError(f"timestamp regression: {s.t} < {state.t}")
        if s.t == state.t:
            continue
        phi_total = _propagate_step(state, s) @ phi_total
    state.q = state.q / np.linalg.norm(state.q)
    state.cov = 0.5 * (state.cov + state.cov.T)
    return state, phi_total


def clone_camera(state: FilterState, key: int) -> FilterState:
    """Augment the state with the current camera pose; slides the window."""
    if key in state.clones:
        raise ValueError(f"duplicate clone key {key}")
    t_lc = state.camera_pose_local()
    d = state.dim
    j = np.zeros((CLONE_DIM, d))
    j[0:3, 0:3] = np.eye(3)
    lever = quat_to_matrix(state.q) @ state.cfg.cam_extrinsics.t
    j[3:6, 0:3] = -skew(lever)
    j[3:6, 3:6] = np.eye(3)
    new = np.zeros((d + CLONE_DIM, d + CLONE_DIM))
    new[:d, :d] = state.cov
    cross = state.cov @ j.T
    new[:d, d:] = cross
    new[d:, :d] = cross.T
    new[d:, d:] = j @ state.cov @ j.T
    state.cov = new
    state.clone_keys.append(key)
    state.clones[key] = t_lc
    if len(state.clone_keys) > state.cfg.window_size:
        marginalize_oldest(state)
    return state


def marginalize_oldest(state: FilterState):
    key = state.clone_keys[0]
    s = state.clone_slot(key)
    keep = np.r_[np.arange(0, s), np.arange(s + CLONE_DIM, state.dim)]
    state.cov = state.cov[np.ix_(keep, keep)]
    state.clone_keys.pop(0)
    del state.clones[key]


def align_initial(state: FilterState, global_camera_pose: Pose,
                  camera_key: Optional[int] = None,
                  effective_inliers: int = 1) -> FilterState:
    """Anchor the local frame: T_GL = T_GC o (T_LC)^-1.

    Uses the window clone ``camera_key`` (or the current camera pose) as
    the local side of the chain; alignment covariance is initialized from a
    localization-quality proxy (config sigmas shrunk by sqrt(inliers)).
    """
    if camera_key is not None:
        if camera_key not in state.clones:
            raise ValueError(f"unknown clone {camera_key}")
        t_lc = state.clones[camera_key]
    else:
        t_lc = state.camera_pose_local()
    state.align = compose(global_camera_pose, invert(t_lc))
    state.aligned = True
    scale = 1.0 / np.sqrt(max(1, effective_inliers))
    a = ALIGN_OFF
    state.cov[a:a + 6, :] = 0.0
    state.cov[:, a:a + 6] = 0.0
    state.cov[a:a + 3, a:a + 3] = np.eye(3) * (state.cfg.align_sigma_rot
                                               * scale) ** 2
    state.cov[a + 3:a + 6, a + 3:a + 6] = np.eye(3) * (state.cfg.align_sigma_pos
                                                       * scale) ** 2
    return state


def _normalized_projection(p_c: np.ndarray):
    z = p_c[2]
    if z <= 1e-9:
        return None, None
    zhat = p_c[:2] / z
    jac = np.array([[1.0 / z, 0.0, -p_c[0] / z ** 2],
                    [0.0, 1.0 / z, -p_c[1] / z ** 2]])
    return zhat, jac


def _global_match_rows(state: FilterState, u: GlobalMatchUpdate):
    """Residual and Jacobian rows of one global 2D-3D match."""
    t_lc = state.clones[u.camera_key]
    r_a = state.align.r
    r_c = t_lc.r
    p_l = invert(state.align).apply(u.landmark)
    p_c = invert(t_lc).apply(p_l)
    zhat, jproj = _normalized_projection(p_c)
    if zhat is None:
        return None
    resid = u.z - zhat
    h = np.zeros((2, state.dim))
    slot = state.clone_slot(u.camera_key)
    # clone pose block
    h[:, slot:slot + 3] = jproj @ (r_c.T @ skew(p_l - t_lc.t))
    h[:, slot + 3:slot + 6] = jproj @ (-r_c.T)
    # alignment block
    d_pl = r_a.T @ skew(u.landmark - state.align.t)
    h[:, ALIGN_OFF:ALIGN_OFF + 3] = jproj @ (r_c.T @ d_pl)
    h[:, ALIGN_OFF + 3:ALIGN_OFF + 6] = jproj @ (-(r_c.T @ r_a.T))
    return resid, h


def _apply_stacked_update(state: FilterState, rows_h: List[np.ndarray],
                          rows_r: List[np.ndarray], sigmas: List[float],
                          compress: bool, report: UpdateReport):
    """Whiten, optionally QR-compress, and apply the EKF update."""
    if not rows_h:
        return state
    h = np.concatenate([hh / s for hh, s in zip(rows_h, sigmas)])
    r = np.concatenate([rr / s for rr, s in zip(rows_r, sigmas)])
    if compress and h.shape[0] > h.shape[1]:
        q_mat, t_h = np.linalg.qr(h, mode="reduced")
        r = q_mat.T @ r
        h = t_h
    s_mat = h @ state.cov @ h.T + np.eye(h.shape[0])
    try:
        np.linalg.cholesky(s_mat)
    except np.linalg.LinAlgError:
        report.rejected_not_psd = True
        return state
    k = np.linalg.solve(s_mat, h @ state.cov).T
    dx = k @ r
    ikh = np.eye(state.dim) - k @ h
    state.cov = ikh @ state.cov @ ikh.T + k @ k.T
    state.apply_correction(dx)
    state.symmetrize()
    report.applied = True
    return state


def update_global(state: FilterState, updates: Sequence[GlobalMatchUpdate],
                  chi2_prob: Optional[float] = None, compress: bool = True,
                  report: Optional[UpdateReport] = None) -> FilterState:
    """EKF update from global 2D-3D matches against fixed map landmarks.

    Measurements are gated per match with a Mahalanobis test, whitened,
    stacked and QR-compressed before the update.  No survivors -> no-op.
    """
    if not state.aligned:
        raise ValueError("alignment not initialized; call align_initial first")
    report = report if report is not None else UpdateReport()
    prob = state.cfg.chi2_prob if chi2_prob is None else chi2_prob
    gate = chi2.ppf(prob, 2)
    rows_h, rows_r, sigmas = [], [], []
    for u in updates:
        if u.camera_key not in state.clones:
            raise ValueError(f"update references unknown clone {u.camera_key}")
        out = _global_match_rows(state, u)
        if out is None:
            report.gated += 1
            continue
        resid, h = out
        s_i = h @ state.cov @ h.T + np.eye(2) * u.sigma ** 2
        m2 = float(resid @ np.linalg.solve(s_i, resid))
        if m2 > gate:
            report.gated += 1
            continue
        rows_h.append(h)
        rows_r.append(resid)
        sigmas.append(u.sigma)
        report.accepted += 1
    return _apply_stacked_update(state, rows_h, rows_r, sigmas, compress,
                                 report)


def update_local_tracks(state: FilterState, tracks: Sequence[Track],
                        exclude_track_ids: Optional[set] = None,
                        chi2_prob: Optional[float] = None,
                        compress: bool = True,
                        report: Optional[UpdateReport] = None) -> FilterState:
    """MSCKF-style update from completed local feature tracks.

    Each track is triangulated from the window clones; the landmark-position
    error is marginalized by projecting residuals and Jacobians onto the
    left nullspace of the landmark Jacobian (residual dimension 2m - 3).
    Tracks already used as global constraints must be excluded.
    """
    report = report if report is not None else UpdateReport()
    prob = state.cfg.chi2_prob if chi2_prob is None else chi2_prob
    rows_h, rows_r, sigmas = [], [], []
    sigma = state.cfg.pixel_sigma
    for tr in tracks:
        if exclude_track_ids and tr.track_id in exclude_track_ids:
            continue
        obs = [(k, z) for k, z in tr.observations if k in state.clones]
        if len(obs) < 2:
            continue
        rays = []
        for key, z in obs:
            pose = state.clones[key]
            v = np.array([z[0], z[1], 1.0])
            rays.append((pose, v / np.linalg.norm(v)))
        try:
            p_l = triangulate(rays)
        except DegenerateGeometry:
            continue
        m = len(obs)
        h_x = np.zeros((2 * m, state.dim))
        h_f = np.zeros((2 * m, 3))
        resid = np.zeros(2 * m)
        ok = True
        for i, (key, z) in enumerate(obs):
            t_lc = state.clones[key]
            p_c = invert(t_lc).apply(p_l)
            zhat, jproj = _normalized_projection(p_c)
            if zhat is None:
                ok = False
                break
            resid[2 * i:2 * i + 2] = z - zhat
            slot = state.clone_slot(key)
            r_c = t_lc.r
            h_x[2 * i:2 * i + 2, slot:slot + 3] = \
                jproj @ (r_c.T @ skew(p_l - t_lc.t))
            h_x[2 * i:2 * i + 2, slot + 3:slot + 6] = jproj @ (-r_c.T)
            h_f[2 * i:2 * i + 2] = jproj @ r_c.T
        if not ok:
            continue
        # left-nullspace projection of the landmark Jacobian
        u_svd, sv, _ = np.linalg.svd(h_f, full_matrices=True)
        nullspace = u_svd[:, 3:]
        r0 = nullspace.T @ resid
        h0 = nullspace.T @ h_x
        dof = 2 * m - 3
        s_i = h0 @ state.cov @ h0.T + np.eye(dof) * sigma ** 2
        m2 = float(r0 @ np.linalg.solve(s_i, r0))
        if m2 > chi2.ppf(prob, dof):
            report.gated += 1
            continue
        rows_h.append(h0)
        rows_r.append(r0)
        sigmas.append(sigma)
        report.accepted += 1
    return _apply_stacked_update(state, rows_h, rows_r, sigmas, compress,
                                 report)
