import numpy as np
import pytest

from cityloc.geometry import Camera, invert, rotation_angle, unit
from cityloc.ransac import (
    Correspondence,
    RansacConfig,
    effective_inlier_count,
    ransac,
    refine_pnp,
    reprojection_residuals,
)
from test_solvers import gravity_in_cam, points_in_front, random_cam_pose

CAM = Camera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def make_corrs(rng, pose, n_inliers, n_outliers, noise_px=0.0):
    pts = points_in_front(rng, pose, n_inliers, depth=(4.0, 30.0))
    corrs = []
    inv = invert(pose)
    for i, p in enumerate(pts):
        pc = inv.apply(p)
        px = np.array([CAM.fx * pc[0] / pc[2] + CAM.cx,
                       CAM.fy * pc[1] / pc[2] + CAM.cy])
        px += rng.normal(scale=noise_px, size=2)
        b = unit([(px[0] - CAM.cx) / CAM.fx, (px[1] - CAM.cy) / CAM.fy, 1.0])
        corrs.append(Correspondence(i, px, b, i, p))
    for j in range(n_outliers):
        p = rng.uniform([-30, -30, 0], [30, 30, 10])
        px = rng.uniform([0, 0], [CAM.width, CAM.height])
        b = unit([(px[0] - CAM.cx) / CAM.fx, (px[1] - CAM.cy) / CAM.fy, 1.0])
        corrs.append(Correspondence(n_inliers + j, px, b, n_inliers + j, p))
    return corrs


class TestEffectiveInlierCount:
    def test_single_cell(self):
        px = np.tile([100.0, 100.0], (10, 1)) + np.arange(10)[:, None] * 0.5
        assert effective_inlier_count(px, cell_px=40.0) == 1

    def test_distinct_cells(self):
        px = np.stack([np.arange(10) * 50.0, np.zeros(10)], axis=1)
        assert effective_inlier_count(px, cell_px=40.0) == 10

    def test_spread_beats_clustered(self, rng):
        clustered = rng.uniform(0, 35, size=(20, 2))
        spread = rng.uniform(0, 600, size=(20, 2))
        assert effective_inlier_count(spread) > effective_inlier_count(clustered)

    def test_empty(self):
        assert effective_inlier_count(np.zeros((0, 2))) == 0


class TestRansac:
    def test_all_inliers_converges(self, rng):
        pose = random_cam_pose(rng)
        corrs = make_corrs(rng, pose, 40, 0)
        cfg = RansacConfig(seed=3)
        res = ransac(corrs, "p2p", CAM, cfg, gravity_cam=gravity_in_cam(pose))
        assert res is not None
        assert res.inlier_ratio == 1.0
        assert np.linalg.norm(res.pose.t - pose.t) < 1e-4

    def test_thirty_percent_inliers(self, rng):
        ok = 0
        trials = 30
        for t in range(trials):
            r = np.random.default_rng(t)
            pose = random_cam_pose(r)
            corrs = make_corrs(r, pose, 60, 140, noise_px=0.5)
            cfg = RansacConfig(seed=t, max_iterations=500)
            res = ransac(corrs, "p2p", CAM, cfg,
                         gravity_cam=gravity_in_cam(pose))
            if res is None:
                continue
            dt = np.linalg.norm(res.pose.t - pose.t)
            dr = rotation_angle(res.pose.r.T @ pose.r)
            ok += dt < 0.5 and np.degrees(dr) < 2.0
        assert ok >= trials - 1

    def test_all_outliers_fails(self, rng):
        pose = random_cam_pose(rng)
        corrs = make_corrs(rng, pose, 0, 80)
        res = ransac(corrs, "p2p", CAM, RansacConfig(seed=1),
                     gravity_cam=gravity_in_cam(pose))
        assert res is None

    def test_insufficient_matches(self, rng):
        pose = random_cam_pose(rng)
        corrs = make_corrs(rng, pose, 1, 0)
        assert ransac(corrs, "p2p", CAM, RansacConfig(),
                      gravity_cam=gravity_in_cam(pose)) is None

    def test_inliers_reproject_within_threshold(self, rng):
        pose = random_cam_pose(rng)
        corrs = make_corrs(rng, pose, 50, 50, noise_px=1.0)
        cfg = RansacConfig(seed=5)
        res = ransac(corrs, "p2p", CAM, cfg, gravity_cam=gravity_in_cam(pose))
        assert res is not None
        pts = np.stack([c.point for c in res.inliers])
        pix = np.stack([c.pixel for c in res.inliers])
        r = reprojection_residuals(res.pose, CAM, pts, pix)
        assert np.all(r <= cfg.inlier_threshold_px + 1e-9)

    def test_deterministic_given_seed(self, rng):
        pose = random_cam_pose(rng)
        corrs = make_corrs(rng, pose, 30, 70, noise_px=1.0)
        cfg = RansacConfig(seed=11)
        a = ransac(corrs, "p3p", CAM, cfg)
        b = ransac(corrs, "p3p", CAM, cfg)
        assert (a is None) == (b is None)
        if a is not None:
            assert np.array_equal(a.pose.q, b.pose.q)
            assert np.array_equal(a.pose.t, b.pose.t)
            assert [c.keypoint_id for c in a.inliers] == \
                   [c.keypoint_id for c in b.inliers]

    def test_p3p_solver_path(self, rng):
        pose = random_cam_pose(rng)
        corrs = make_corrs(rng, pose, 50, 20, noise_px=0.5)
        res = ransac(corrs, "p3p", CAM, RansacConfig(seed=2))
        assert res is not None
        assert np.linalg.norm(res.pose.t - pose.t) < 0.3


class TestRefinePnp:
    def test_refine_improves_noisy_pose(self, rng):
        pose = random_cam_pose(rng)
        corrs = make_corrs(rng, pose, 60, 0, noise_px=0.5)
        pts = np.stack([c.point for c in corrs])
        pix = np.stack([c.pixel for c in corrs])
        from cityloc.geometry import Pose, quat_from_rotvec, quat_mul
        dq = quat_from_rotvec(np.array([0.01, -0.02, 0.015]))
        rough = Pose(quat_mul(dq, pose.q), pose.t + [0.15, -0.1, 0.08])
        refined = refine_pnp(rough, CAM, pts, pix)
        before = reprojection_residuals(rough, CAM, pts, pix).mean()
        after = reprojection_residuals(refined, CAM, pts, pix).mean()
        assert after < before
        assert np.linalg.norm(refined.t - pose.t) < 0.02
