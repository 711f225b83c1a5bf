"""Simulation harness for the pose-fusion estimators.

Generates per-frame records along an analytic walking trajectory: IMU
batches, local feature tracks (synthetic corridor points projected with
pixel noise) and, at a fixed interval, global 2D-3D matches against
map landmarks (true positions perturbed by a map-error sigma).  Records
serialize to JSON lines for the ``fuse`` subcommand and drive both the EKF
runner and the BA baseline for comparisons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .ekf import (
    FilterConfig,
    FilterState,
    GlobalMatchUpdate,
    Track,
    align_initial,
    clone_camera,
    propagate,
    update_global,
    update_local_tracks,
)
from .geometry import Pose, compose, invert
from .scene_sim import ImuSample, WalkTrajectory, imu_stream

# camera-from-body: +z camera forward along body +x, image y down
R_IC = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


@dataclass
class FusionSimConfig:
    duration: float = 60.0
    imu_rate: float = 200.0
    frame_rate: float = 10.0
    sigma_gyro: float = 1e-3
    sigma_accel: float = 8e-3
    # residual biases after factory calibration; the EKF estimates them,
    # the discard-BA baseline cannot
    gyro_bias: Tuple[float, float, float] = (5e-4, -3e-4, 4e-4)
    accel_bias: Tuple[float, float, float] = (3e-3, -2e-3, 2.5e-3)
    pixel_sigma: float = 1.0 / 500.0  # normalized units
    map_sigma: float = 0.05  # landmark position error of the stored map
    n_corridor_points: int = 600
    corridor_offset: float = 8.0
    track_min_frames: int = 3
    track_max_frames: int = 25  # tracker churn: features re-detect after this
    view_range: float = 25.0
    localization_interval: float = 2.0
    matches_per_localization: int = 25
    align_frame: int = 0
    seed: int = 0
    # the local SLAM frame: simulation runs it identical to global unless
    # an offset is configured (drift studies set one)
    local_frame_offset: Pose = field(default_factory=Pose.identity)


@dataclass
class FrameRecord:
    frame_id: int
    t: float
    imu: List[ImuSample]
    track_obs: List[Tuple[int, np.ndarray]]  # (track_id, normalized uv)
    completed_tracks: List[Track]
    global_matches: List[dict]  # {track_id?, landmark (3,), z (2,)}
    loc_pose: Optional[Pose]  # simulated localization result (T_GC)
    true_body_pose: Pose  # T_GI ground truth


@dataclass
class FusionSim:
    config: FusionSimConfig
    records: List[FrameRecord]
    init_pose: Pose  # T_GI at t = 0
    init_velocity: np.ndarray


def _camera_pose(traj: WalkTrajectory, t: float) -> Pose:
    return compose(traj.body_pose(t), Pose.from_rt(R_IC, np.zeros(3)))


def simulate(cfg: FusionSimConfig) -> FusionSim:
    rng = np.random.default_rng(cfg.seed)
    traj = WalkTrajectory()
    # corridor feature points flanking the path
    length = traj.speed * cfg.duration + 40.0
    pts = np.stack([
        rng.uniform(traj.origin[0] - 10, traj.origin[0] + length,
                    cfg.n_corridor_points),
        traj.origin[1] + rng.choice([-1.0, 1.0], cfg.n_corridor_points)
        * rng.uniform(0.5, 1.5, cfg.n_corridor_points) * cfg.corridor_offset,
        rng.uniform(0.0, 6.0, cfg.n_corridor_points),
    ], axis=1)

    n_frames = int(cfg.duration * cfg.frame_rate)
    dt_frame = 1.0 / cfg.frame_rate
    live_tracks: Dict[int, Track] = {}
    point_track_id = -np.ones(cfg.n_corridor_points, dtype=np.int64)
    next_track = 0
    records = []
    t_prev = 0.0
    loc_every = max(1, int(round(cfg.localization_interval * cfg.frame_rate)))
    for k in range(n_frames):
        t = (k + 1) * dt_frame
        imu = imu_stream(traj, t_prev, t, cfg.imu_rate, rng,
                         cfg.sigma_gyro, cfg.sigma_accel,
                         np.asarray(cfg.gyro_bias), np.asarray(cfg.accel_bias))
        cam = _camera_pose(traj, t)
        inv = invert(cam)
        pc = pts @ inv.r.T + inv.t
        z = pc[:, 2]
        vis = (z > 1.0) & (z < cfg.view_range)
        uv = pc[:, :2] / np.where(vis, z, 1.0)[:, None]
        vis &= (np.abs(uv[:, 0]) < 0.6) & (np.abs(uv[:, 1]) < 0.45)

        track_obs = []
        completed = []
        vis_idx = set(np.flatnonzero(vis).tolist())
        # close tracks that lost their point or exceeded the tracker's
        # feature lifetime (the point re-enters as a fresh track)
        for pi in np.flatnonzero(point_track_id >= 0):
            tid = int(point_track_id[pi])
            expired = len(live_tracks[tid].observations) >= cfg.track_max_frames
            if int(pi) not in vis_idx or expired:
                tr = live_tracks.pop(tid)
                point_track_id[pi] = -1
                if len(tr.observations) >= cfg.track_min_frames:
                    completed.append(tr)
        for pi in sorted(vis_idx):
            obs = uv[pi] + rng.normal(scale=cfg.pixel_sigma, size=2)
            if point_track_id[pi] < 0:
                point_track_id[pi] = next_track
                live_tracks[next_track] = Track(next_track, [])
                next_track += 1
            live_tracks[int(point_track_id[pi])].observations.append(
                (k, obs))
            track_obs.append((int(point_track_id[pi]), obs))

        global_matches = []
        loc_pose = None
        if k % loc_every == 0:
            vis_list = sorted(vis_idx)
            rng.shuffle(vis_list)
            take = vis_list[:cfg.matches_per_localization]
            for pi in take:
                global_matches.append({
                    "track_id": int(point_track_id[pi]),
                    "landmark": pts[pi] + rng.normal(scale=cfg.map_sigma,
                                                     size=3),
                    "z": uv[pi] + rng.normal(scale=cfg.pixel_sigma, size=2),
                })
            loc_pose = cam  # simulated server answer (exact; matches carry noise)
        records.append(FrameRecord(k, t, imu, track_obs, completed,
                                   global_matches, loc_pose,
                                   traj.body_pose(t)))
        t_prev = t
    return FusionSim(cfg, records, traj.body_pose(0.0), traj.velocity(0.0))


@dataclass
class FusionEstimate:
    t: float
    pose: Pose  # estimated body pose, global frame
    true_pose: Pose

    @property
    def position_error(self) -> float:
        return float(np.linalg.norm(self.pose.t - self.true_pose.t))


def default_filter_config(cfg: FusionSimConfig) -> FilterConfig:
    return FilterConfig(
        sigma_gyro=cfg.sigma_gyro, sigma_accel=cfg.sigma_accel,
        pixel_sigma=cfg.pixel_sigma,
        cam_extrinsics=Pose.from_rt(R_IC, np.zeros(3)))


def run_ekf(sim: FusionSim, fcfg: Optional[FilterConfig] = None,
            use_global: bool = True) -> List[FusionEstimate]:
    """Feed the simulation through the EKF; returns per-frame estimates."""
    cfg = sim.config
    if fcfg is None:
        fcfg = default_filter_config(cfg)
    state = FilterState(fcfg, t0=0.0, pose0=sim.init_pose,
                        velocity0=sim.init_velocity)
    out = []
    sigma_global = fcfg.pixel_sigma * fcfg.noise_inflation
    for rec in sim.records:
        propagate(state, rec.imu)
        clone_camera(state, rec.frame_id)
        used_tids = set()
        if use_global and rec.global_matches:
            if not state.aligned:
                align_initial(state, rec.loc_pose, camera_key=rec.frame_id,
                              effective_inliers=len(rec.global_matches))
            updates = []
            for gm in rec.global_matches:
                tid = gm.get("track_id")
                track = _find_track(sim, tid, rec.frame_id)
                if track is not None:
                    used_tids.add(tid)
                    for cam_key, z in track.observations:
                        if cam_key in state.clones:
                            updates.append(GlobalMatchUpdate(
                                cam_key, np.asarray(gm["landmark"]),
                                np.asarray(z), sigma_global))
                else:
                    updates.append(GlobalMatchUpdate(
                        rec.frame_id, np.asarray(gm["landmark"]),
                        np.asarray(gm["z"]), sigma_global))
            if updates:
                update_global(state, updates)
        if rec.completed_tracks:
            update_local_tracks(state, rec.completed_tracks,
                                exclude_track_ids=used_tids)
        out.append(FusionEstimate(rec.t, state.global_pose(),
                                  rec.true_body_pose))
    return out


def _find_track(sim: FusionSim, tid: Optional[int], upto_frame: int):
    """Observations of a live track up to the given frame."""
    if tid is None:
        return None
    obs = []
    for rec in sim.records:
        if rec.frame_id > upto_frame:
            break
        for t, z in rec.track_obs:
            if t == tid:
                obs.append((rec.frame_id, z))
    if len(obs) < 2:
        return None
    return Track(tid, obs)


def error_change_std(estimates: List[FusionEstimate]) -> float:
    """Std of frame-to-frame change in position error (smoothness)."""
    errs = np.array([e.position_error for e in estimates])
    return float(np.diff(errs).std())


def mean_position_error(estimates: List[FusionEstimate]) -> float:
    return float(np.mean([e.position_error for e in estimates]))


def records_to_jsonl(sim: FusionSim) -> str:
    """Line-delimited record serialization (the fuse subcommand's input)."""
    lines = []
    for rec in sim.records:
        lines.append(json.dumps({
            "frame_id": rec.frame_id,
            "t": rec.t,
            "imu": [[s.t, *s.gyro.tolist(), *s.accel.tolist()]
                    for s in rec.imu],
            "tracks": [{"id": tid, "uv": z.tolist()}
                       for tid, z in rec.track_obs],
            "global_matches": [{
                "track_id": gm.get("track_id"),
                "landmark": np.asarray(gm["landmark"]).tolist(),
                "uv": np.asarray(gm["z"]).tolist(),
            } for gm in rec.global_matches],
            "loc_pose": None if rec.loc_pose is None else {
                "q": rec.loc_pose.q.tolist(), "t": rec.loc_pose.t.tolist()},
            "true_pose": {"q": rec.true_body_pose.q.tolist(),
                          "t": rec.true_body_pose.t.tolist()},
        }))
    return "\n".join(lines) + "\n"


def load_sim(text: str, cfg: Optional[FusionSimConfig] = None) -> FusionSim:
    """Rebuild a FusionSim from JSON lines; the initial velocity comes from
    finite differences of the first two true poses."""
    records = records_from_jsonl(text)
    if not records:
        raise ValueError("no records in input")
    if len(records) >= 2:
        dt = records[1].t - records[0].t
        v0 = (records[1].true_body_pose.t - records[0].true_body_pose.t) / dt
    else:
        v0 = np.zeros(3)
    # back-extrapolate the t=0 pose from the first record
    first = records[0]
    p0 = Pose(first.true_body_pose.q, first.true_body_pose.t - v0 * first.t)
    return FusionSim(cfg if cfg is not None else FusionSimConfig(),
                     records, p0, v0)


def records_from_jsonl(text: str) -> List[FrameRecord]:
    records = []
    live: Dict[int, Track] = {}
    last_seen: Dict[int, int] = {}
    parsed = [json.loads(line) for line in text.splitlines() if line.strip()]
    for row in parsed:
        k = row["frame_id"]
        imu = [ImuSample(v[0], np.array(v[1:4]), np.array(v[4:7]))
               for v in row["imu"]]
        track_obs = [(tr["id"], np.array(tr["uv"])) for tr in row["tracks"]]
        seen = set()
        for tid, z in track_obs:
            live.setdefault(tid, Track(tid, [])).observations.append((k, z))
            last_seen[tid] = k
            seen.add(tid)
        completed = []
        for tid in [t for t, last in last_seen.items()
                    if last < k and t in live]:
            completed.append(live.pop(tid))
            del last_seen[tid]
        gms = [{"track_id": gm.get("track_id"),
                "landmark": np.array(gm["landmark"]),
                "z": np.array(gm["uv"])} for gm in row["global_matches"]]
        loc = row.get("loc_pose")
        loc_pose = None if loc is None else Pose(np.array(loc["q"]),
                                                 np.array(loc["t"]))
        tp = row["true_pose"]
        records.append(FrameRecord(k, row["t"], imu, track_obs, completed,
                                   gms, loc_pose,
                                   Pose(np.array(tp["q"]), np.array(tp["t"]))))
    return records
