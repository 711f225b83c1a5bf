import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cityloc.geometry import (
    Camera,
    DegenerateGeometry,
    Pose,
    compose,
    invert,
    project,
    project_many,
    quat_from_axis_angle,
    quat_normalize,
    quat_to_matrix,
    rotation_aligning,
    triangulate,
    unit,
)


def random_pose(rng):
    q = quat_normalize(rng.normal(size=4))
    t = rng.normal(scale=5.0, size=3)
    return Pose(q, t)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


CAM = Camera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


class TestPose:
    def test_identity_compose(self, rng):
        p = random_pose(rng)
        q = compose(Pose.identity(), p)
        assert np.allclose(q.q, p.q, atol=1e-12)
        assert np.allclose(q.t, p.t, atol=1e-12)

    def test_inverse_gives_identity(self, rng):
        p = random_pose(rng)
        i = compose(p, invert(p))
        assert np.allclose(quat_to_matrix(i.q), np.eye(3), atol=1e-9)
        assert np.allclose(i.t, 0, atol=1e-9)

    def test_compose_matches_double_application(self, rng):
        for _ in range(20):
            p1, p2 = random_pose(rng), random_pose(rng)
            x = rng.normal(size=3)
            assert np.allclose(compose(p1, p2).apply(x), p1.apply(p2.apply(x)),
                               atol=1e-9)

    def test_compose_associative(self, rng):
        for _ in range(20):
            a, b, c = (random_pose(rng) for _ in range(3))
            x = rng.normal(size=3)
            left = compose(compose(a, b), c).apply(x)
            right = compose(a, compose(b, c)).apply(x)
            assert np.allclose(left, right, atol=1e-9)

    def test_quaternion_stays_unit_after_many_compositions(self, rng):
        p = random_pose(rng)
        acc = Pose.identity()
        for _ in range(1000):
            acc = compose(acc, p)
        assert abs(np.linalg.norm(acc.q) - 1.0) < 1e-9

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose(np.array([1.0, 1.0, 0.0, 0.0]), np.zeros(3))


class TestCamera:
    def test_invalid_intrinsics(self):
        with pytest.raises(ValueError):
            Camera(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            Camera(fx=1, fy=1, cx=20, cy=0, width=10, height=10)

    def test_bearing_roundtrip(self, rng):
        px = rng.uniform([0, 0], [640, 480], size=(5, 2))
        b = CAM.bearing_from_pixel(px)
        back = CAM.pixel_from_normalized(b[:, :2] / b[:, 2:3])
        assert np.allclose(back, px, atol=1e-9)


class TestProject:
    def test_optical_axis_point(self):
        px = project(CAM, Pose.identity(), np.array([0.0, 0.0, 1.0]))
        assert np.allclose(px, [CAM.cx, CAM.cy], atol=1e-12)

    def test_behind_camera_flagged(self):
        assert project(CAM, Pose.identity(), np.array([0.0, 0.0, -1.0])) is None

    def test_point_at_center_degenerate(self):
        with pytest.raises(DegenerateGeometry):
            project(CAM, Pose.identity(), np.zeros(3))

    def test_unproject_roundtrip(self, rng):
        pose = random_pose(rng)
        for _ in range(20):
            p_c = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1),
                            rng.uniform(0.5, 10)])
            p_w = pose.apply(p_c)
            px = project(CAM, pose, p_w)
            ray_c = CAM.bearing_from_pixel(px)
            # p_c must lie on the ray within 1e-9
            cross = np.cross(ray_c, p_c)
            assert np.linalg.norm(cross) / np.linalg.norm(p_c) < 1e-9

    def test_pose_equivariance(self, rng):
        pose, delta = random_pose(rng), random_pose(rng)
        x = pose.apply(np.array([0.3, -0.2, 4.0]))
        a = project(CAM, compose(delta, pose), delta.apply(x))
        b = project(CAM, pose, x)
        assert np.allclose(a, b, atol=1e-9)

    def test_project_many_matches_scalar(self, rng):
        pose = random_pose(rng)
        pts = pose.apply(rng.uniform([-1, -1, 0.5], [1, 1, 8], size=(50, 3)))
        px, valid = project_many(CAM, pose, pts)
        for i in range(len(pts)):
            single = project(CAM, pose, pts[i])
            assert valid[i] and np.allclose(px[i], single, atol=1e-9)


class TestTriangulate:
    def test_orthogonal_rays_exact(self):
        # ray 1 from origin along +x toward (1,1,0); ray 2 from (2,0,0) along +y
        p1 = Pose.identity()
        b1 = unit([1.0, 1.0, 0.0])
        p2 = Pose(np.array([0, 0, 0, 1.0]), np.array([2.0, 0.0, 0.0]))
        b2 = unit([-1.0, 1.0, 0.0])
        x = triangulate([(p1, b1), (p2, b2)])
        assert np.allclose(x, [1.0, 1.0, 0.0], atol=1e-9)

    def test_parallel_rays_degenerate(self):
        p1 = Pose.identity()
        p2 = Pose(np.array([0, 0, 0, 1.0]), np.array([0.0, 0.0, 1.0]))
        d = unit([1.0, 0.0, 0.0])
        with pytest.raises(DegenerateGeometry):
            triangulate([(p1, d), (p2, d)])

    def test_single_observation_rejected(self):
        with pytest.raises(DegenerateGeometry):
            triangulate([(Pose.identity(), unit([0, 0, 1.0]))])

    def test_noisefree_multiview(self, rng):
        target = np.array([3.0, -2.0, 1.5])
        obs = []
        for _ in range(5):
            pose = random_pose(rng)
            d_world = unit(target - pose.t)
            bearing = invert(pose).r @ d_world
            obs.append((pose, bearing))
        assert np.allclose(triangulate(obs), target, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-np.pi, np.pi), st.integers(0, 2))
def test_rotation_aligning_property(angle, axis_idx):
    axis = np.zeros(3)
    axis[axis_idx] = 1.0
    r = quat_to_matrix(quat_from_axis_angle(axis, angle))
    a = unit([0.3, -0.5, 0.81])
    b = r @ a
    r2 = rotation_aligning(a, b)
    assert np.allclose(r2 @ a, b, atol=1e-9)
