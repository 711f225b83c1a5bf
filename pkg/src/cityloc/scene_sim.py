"""Synthetic city scenes, database captures, queries and IMU streams.

The scene is a block grid: streets run along x, building facades flank each
street, and landmarks sit on the facades with outward normals.  Database
cameras are car-like captures on the street centerline (several headings per
stop); queries are phone-like captures from the sidewalk with a downward
pitch.  Every landmark carries a ground-truth descriptor on a unit
hypersphere embedded in the raw descriptor space; observations are the
ground truth plus Gaussian noise.  Visual aliasing is simulated by making a
fraction of landmarks share their ground-truth appearance with a partner
("repeated elements").

Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import (
    GRAVITY_WORLD,
    Camera,
    Pose,
    invert,
    quat_from_axis_angle,
    quat_to_matrix,
)
from .mapmodel import Landmark, MapModel

VGA = Camera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)

# camera-to-body when yaw = 0: camera +z looks along world +x, +x right (-y),
# +y down (-z)
R_CAM_FORWARD = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


@dataclass
class SceneConfig:
    area: float = 400.0  # square side, meters
    street_spacing: float = 100.0
    facade_offset: float = 12.0  # facade distance from street centerline
    building_height: float = 10.0
    landmark_count: int = 45000
    descriptor_dim: int = 40
    signal_dim: int = 16
    min_descriptor_angle_deg: float = 30.0
    aliasing_fraction: float = 0.0  # landmarks sharing appearance with a partner
    sigma_desc: float = 0.05
    sigma_orientation: float = 0.05
    db_spacing: float = 8.0  # meters between capture stops
    db_headings: int = 4  # cameras per stop (2 sideways, then fwd/back)
    db_camera_height: float = 2.5
    query_camera_height: float = 1.6
    query_pitch_deg: float = 12.0  # phone facing down in walking direction
    sidewalk_offset: float = 7.0
    max_view_distance: float = 40.0
    min_view_distance: float = 2.0
    sigma_gps: float = 5.0
    sigma_px: float = 1.0
    sigma_gravity: float = 0.0
    clutter_fraction: float = 0.25  # query keypoints without a landmark
    max_keypoints: int = 800
    min_visible_per_camera: int = 1
    seed: int = 0


@dataclass
class QueryFrame:
    frame_id: int
    camera: Camera
    keypoints: np.ndarray  # (n, 2) pixels
    descriptors: np.ndarray  # (n, D) raw or (n, d) projected
    orientations: np.ndarray  # (n,) radians
    gravity_cam: np.ndarray  # (3,) unit, down in camera frame
    gps_xy: Optional[np.ndarray]  # (2,) position prior
    gps_sigma: float = 0.0
    projected: bool = False  # descriptors already in the projected space
    pq_codes: Optional[np.ndarray] = None  # (n, M) when PQ-encoded

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)


@dataclass
class GroundTruth:
    landmark_gt_descriptors: np.ndarray  # (N, D) noiseless appearance
    landmark_orientations: np.ndarray  # (N,)
    landmark_normals: np.ndarray  # (N, 3) facade normals
    embedding: np.ndarray  # (D, signal_dim) orthonormal columns
    query_poses: List[Pose] = field(default_factory=list)
    query_visible: List[np.ndarray] = field(default_factory=list)
    query_true_landmarks: List[np.ndarray] = field(default_factory=list)


@dataclass
class Scene:
    config: SceneConfig
    model: MapModel
    truth: GroundTruth
    streets_y: np.ndarray


def _street_rows(cfg: SceneConfig) -> np.ndarray:
    n = max(1, int(cfg.area // cfg.street_spacing))
    return (np.arange(n) + 0.5) * cfg.street_spacing


def _unit_sphere_descriptors(rng, n, dim, min_angle_deg, max_tries=50):
    """Random unit vectors with pairwise angle >= min_angle (best effort in
    high dimension; resampling only against a running subset for speed)."""
    cos_lim = np.cos(np.deg2rad(min_angle_deg))
    out = np.empty((n, dim))
    probe = None
    for i in range(n):
        for _ in range(max_tries):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if probe is None or np.max(np.abs(probe @ v)) < cos_lim:
                break
        out[i] = v
        if i < 256:
            probe = out[:i + 1]
    return out


def _visible_mask(pose: Pose, cam: Camera, positions: np.ndarray,
                  normals: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    inv = invert(pose)
    pc = positions @ inv.r.T + inv.t
    z = pc[:, 2]
    ok = (z > cfg.min_view_distance) & (z < cfg.max_view_distance)
    zs = np.where(ok, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    facing = np.einsum("ij,ij->i", normals, pose.t - positions)
    return ok & (facing > 0)


def _pose_at(xy, height, yaw, pitch_deg=0.0) -> Pose:
    rz = quat_to_matrix(quat_from_axis_angle([0, 0, 1.0], yaw))
    rp = quat_to_matrix(quat_from_axis_angle([0, 1.0, 0], 0.0))
    if pitch_deg:
        # pitch the camera down about its x axis
        rp = quat_to_matrix(quat_from_axis_angle([1.0, 0, 0],
                                                 np.deg2rad(pitch_deg)))
    r = rz @ R_CAM_FORWARD @ rp
    t = np.array([xy[0], xy[1], height])
    return Pose.from_rt(r, t)


def generate_scene(cfg: SceneConfig) -> Scene:
    """Build the ground-truth model and its database captures."""
    if cfg.landmark_count <= 0:
        raise ValueError("scene needs at least one landmark")
    rng = np.random.default_rng(cfg.seed)
    streets = _street_rows(cfg)

    # facade rows: two per street, normals pointing back at the street
    rows = []
    for y in streets:
        rows.append((y - cfg.facade_offset, np.array([0.0, 1.0, 0.0])))
        rows.append((y + cfg.facade_offset, np.array([0.0, -1.0, 0.0])))
    per_row = int(np.ceil(cfg.landmark_count / len(rows)))
    positions, normals = [], []
    for y, nrm in rows:
        n = min(per_row, cfg.landmark_count - len(positions))
        if n <= 0:
            break
        x = rng.uniform(0.0, cfg.area, size=n)
        z = rng.uniform(1.0, cfg.building_height, size=n)
        yj = y + rng.normal(scale=0.2, size=n)
        positions.append(np.stack([x, yj, z], axis=1))
        normals.append(np.tile(nrm, (n, 1)))
    positions = np.concatenate(positions)
    normals = np.concatenate(normals)
    n_lm = len(positions)

    # appearance ground truth on the signal hypersphere, embedded in D dims
    signal = _unit_sphere_descriptors(rng, n_lm, cfg.signal_dim,
                                      cfg.min_descriptor_angle_deg)
    emb = np.linalg.qr(rng.normal(size=(cfg.descriptor_dim, cfg.signal_dim)))[0]
    gt_desc = signal @ emb.T
    gt_ori = rng.uniform(-np.pi, np.pi, size=n_lm)
    if cfg.aliasing_fraction > 0:
        n_alias = int(cfg.aliasing_fraction * n_lm)
        tgt = rng.choice(n_lm, size=n_alias, replace=False)
        src = rng.integers(0, n_lm, size=n_alias)
        gt_desc[tgt] = gt_desc[src]
        gt_ori[tgt] = gt_ori[src]

    # database cameras: per stop, two sideways headings, then forward/back
    cam_poses: Dict[int, Pose] = {}
    cam_intr: Dict[int, Camera] = {}
    headings = [np.pi / 2, -np.pi / 2, 0.0, np.pi][:cfg.db_headings]
    cid = 0
    observations: List[Tuple[int, np.ndarray]] = []  # (camera id, visible idx)
    for y in streets:
        n_stops = int(cfg.area // cfg.db_spacing)
        for i in range(n_stops):
            x = (i + 0.5) * cfg.db_spacing
            for h in headings:
                pose = _pose_at((x, y), cfg.db_camera_height, h)
                vis = np.flatnonzero(_visible_mask(pose, VGA, positions,
                                                   normals, cfg))
                if len(vis) < cfg.min_visible_per_camera:
                    continue
                cam_poses[cid] = pose
                cam_intr[cid] = VGA
                observations.append((cid, vis))
                cid += 1
    if not observations:
        raise ValueError("no database camera sees any landmark")

    observers: List[List[int]] = [[] for _ in range(n_lm)]
    for c, vis in observations:
        for j in vis:
            observers[j].append(c)

    landmarks = []
    for j in range(n_lm):
        if not observers[j]:
            continue  # unobserved points never make it into the map
        k = len(observers[j])
        noise = rng.normal(scale=cfg.sigma_desc, size=(k, cfg.descriptor_dim))
        desc = (gt_desc[j] + noise).astype(np.float32)
        ori = gt_ori[j] + rng.normal(scale=cfg.sigma_orientation, size=k)
        ori = np.mod(ori + np.pi, 2 * np.pi) - np.pi
        landmarks.append(Landmark(j, positions[j], desc,
                                  np.array(observers[j], dtype=np.int64),
                                  ori.astype(np.float32)))

    cam_ids = np.array(sorted(cam_poses), dtype=np.int64)
    model = MapModel(cam_ids, cam_poses, cam_intr, landmarks)
    truth = GroundTruth(gt_desc, gt_ori, normals, emb)
    return Scene(cfg, model, truth, streets)


def generate_queries(scene: Scene, n_queries: int,
                     seed: Optional[int] = None) -> List[QueryFrame]:
    """Sidewalk queries with noisy keypoints, descriptors and GPS priors.

    Ground-truth poses and per-query landmark ids are recorded in
    ``scene.truth``.
    """
    cfg = scene.config
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    positions = np.stack([lm.position for lm in scene.model.landmarks])
    normals = scene.truth.landmark_normals[
        [lm.id for lm in scene.model.landmarks]]
    gt_desc = scene.truth.landmark_gt_descriptors[
        [lm.id for lm in scene.model.landmarks]]
    gt_ori = scene.truth.landmark_orientations[
        [lm.id for lm in scene.model.landmarks]]
    ids = np.array([lm.id for lm in scene.model.landmarks])

    frames = []
    made = 0
    attempts = 0
    while made < n_queries and attempts < n_queries * 20:
        attempts += 1
        street = scene.streets_y[int(rng.integers(len(scene.streets_y)))]
        side = 1 if rng.random() < 0.5 else -1
        y = street + side * cfg.sidewalk_offset
        x = rng.uniform(0.05 * cfg.area, 0.95 * cfg.area)
        yaw = (0.0 if rng.random() < 0.5 else np.pi) \
            + rng.normal(scale=np.deg2rad(10.0))
        pose = _pose_at((x, y), cfg.query_camera_height, yaw,
                        pitch_deg=cfg.query_pitch_deg)
        vis = np.flatnonzero(_visible_mask(pose, VGA, positions, normals, cfg))
        if len(vis) < 10:
            continue
        n_lm_kp = min(len(vis),
                      int(cfg.max_keypoints * (1.0 - cfg.clutter_fraction)))
        pick = rng.choice(vis, size=n_lm_kp, replace=False)
        inv = invert(pose)
        pc = positions[pick] @ inv.r.T + inv.t
        px = np.stack([VGA.fx * pc[:, 0] / pc[:, 2] + VGA.cx,
                       VGA.fy * pc[:, 1] / pc[:, 2] + VGA.cy], axis=1)
        px += rng.normal(scale=cfg.sigma_px, size=px.shape)
        desc = gt_desc[pick] + rng.normal(scale=cfg.sigma_desc,
                                          size=(n_lm_kp, cfg.descriptor_dim))
        ori = gt_ori[pick] + rng.normal(scale=cfg.sigma_orientation,
                                        size=n_lm_kp)
        n_clutter = int(round(n_lm_kp * cfg.clutter_fraction
                              / max(1e-9, 1.0 - cfg.clutter_fraction)))
        if n_clutter:
            cl_sig = rng.normal(size=(n_clutter, cfg.signal_dim))
            cl_sig /= np.linalg.norm(cl_sig, axis=1, keepdims=True)
            cl_desc = cl_sig @ scene.truth.embedding.T + rng.normal(
                scale=cfg.sigma_desc, size=(n_clutter, cfg.descriptor_dim))
            cl_px = rng.uniform([0, 0], [VGA.width, VGA.height],
                                size=(n_clutter, 2))
            cl_ori = rng.uniform(-np.pi, np.pi, size=n_clutter)
            px = np.concatenate([px, cl_px])
            desc = np.concatenate([desc, cl_desc])
            ori = np.concatenate([ori, cl_ori])
            true_ids = np.concatenate([ids[pick], np.full(n_clutter, -1)])
        else:
            true_ids = ids[pick]
        order = rng.permutation(len(px))
        gravity_cam = inv.r @ GRAVITY_WORLD
        if cfg.sigma_gravity > 0:
            gravity_cam = gravity_cam + rng.normal(scale=cfg.sigma_gravity,
                                                   size=3)
            gravity_cam /= np.linalg.norm(gravity_cam)
        gps = pose.t[:2] + rng.normal(scale=cfg.sigma_gps, size=2)
        ori = np.mod(ori + np.pi, 2 * np.pi) - np.pi
        frames.append(QueryFrame(
            frame_id=made, camera=VGA, keypoints=px[order],
            descriptors=desc[order].astype(np.float32),
            orientations=ori[order].astype(np.float32),
            gravity_cam=gravity_cam, gps_xy=gps, gps_sigma=cfg.sigma_gps))
        scene.truth.query_poses.append(pose)
        scene.truth.query_visible.append(ids[vis])
        scene.truth.query_true_landmarks.append(true_ids[order])
        made += 1
    if made < n_queries:
        raise ValueError(f"could only place {made}/{n_queries} queries")
    return frames


GRAVITY_ACCEL = 9.81


@dataclass
class WalkTrajectory:
    """Analytic sidewalk walk: constant speed along x with a sinusoidal sway.

    The body (IMU) frame stays level and yaws with the walking direction;
    analytic derivatives provide exact IMU signals.
    """

    origin: np.ndarray = field(default_factory=lambda: np.array([20.0, 43.0, 1.6]))
    speed: float = 1.2  # m/s along x
    sway_amp: float = 1.0  # m
    sway_freq: float = 0.25  # Hz

    @property
    def _w(self) -> float:
        return 2 * np.pi * self.sway_freq

    def position(self, t):
        t = np.asarray(t, dtype=np.float64)
        w = self._w
        return np.stack([self.origin[0] + self.speed * t,
                         self.origin[1] + self.sway_amp * np.sin(w * t),
                         np.full_like(t, self.origin[2])], axis=-1)

    def velocity(self, t):
        t = np.asarray(t, dtype=np.float64)
        w = self._w
        return np.stack([np.full_like(t, self.speed),
                         self.sway_amp * w * np.cos(w * t),
                         np.zeros_like(t)], axis=-1)

    def acceleration(self, t):
        t = np.asarray(t, dtype=np.float64)
        w = self._w
        return np.stack([np.zeros_like(t),
                         -self.sway_amp * w * w * np.sin(w * t),
                         np.zeros_like(t)], axis=-1)

    def yaw(self, t):
        w = self._w
        return np.arctan2(self.sway_amp * w * np.cos(w * np.asarray(t)),
                          self.speed)

    def yaw_rate(self, t):
        t = np.asarray(t, dtype=np.float64)
        w = self._w
        g = self.sway_amp * w * np.cos(w * t)
        gdot = -self.sway_amp * w * w * np.sin(w * t)
        return self.speed * gdot / (self.speed ** 2 + g ** 2)

    def body_pose(self, t) -> Pose:
        """T_LI: IMU/body frame (x forward, z up) in the local frame."""
        r = quat_to_matrix(quat_from_axis_angle([0, 0, 1.0], float(self.yaw(t))))
        return Pose.from_rt(r, self.position(float(t)))

    def omega_body(self, t):
        return np.array([0.0, 0.0, float(self.yaw_rate(t))])

    def accel_body(self, t):
        """Specific force in the body frame (what an accelerometer reads)."""
        a = self.acceleration(float(t)) - np.array([0.0, 0.0, -GRAVITY_ACCEL])
        return self.body_pose(float(t)).r.T @ a


@dataclass
class ImuSample:
    t: float
    gyro: np.ndarray  # rad/s, body frame
    accel: np.ndarray  # m/s^2, body frame (specific force)


def imu_stream(traj: WalkTrajectory, t0: float, t1: float, rate: float,
               rng: Optional[np.random.Generator] = None,
               sigma_gyro: float = 0.0, sigma_accel: float = 0.0,
               gyro_bias: Optional[np.ndarray] = None,
               accel_bias: Optional[np.ndarray] = None) -> List[ImuSample]:
    """Sampled IMU readings along the trajectory, optionally noisy/biased."""
    n = int(round((t1 - t0) * rate))
    bg = np.zeros(3) if gyro_bias is None else np.asarray(gyro_bias)
    ba = np.zeros(3) if accel_bias is None else np.asarray(accel_bias)
    out = []
    for i in range(n):
        t = t0 + (i + 0.5) / rate  # midpoint sampling of each interval
        g = traj.omega_body(t) + bg
        a = traj.accel_body(t) + ba
        if rng is not None and (sigma_gyro > 0 or sigma_accel > 0):
            g = g + rng.normal(scale=sigma_gyro, size=3)
            a = a + rng.normal(scale=sigma_accel, size=3)
        out.append(ImuSample(t0 + (i + 1) / rate, g, a))
    return out
