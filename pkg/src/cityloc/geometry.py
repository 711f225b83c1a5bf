"""Rigid-body transforms, pinhole projection and triangulation.

Conventions used across the package:

* Quaternions are stored scalar-last ``[x, y, z, w]`` and follow the Hamilton
  product, so ``rotmat(quat_mul(a, b)) == rotmat(a) @ rotmat(b)``.
* A :class:`Pose` maps points from its source frame into its target frame:
  ``p_target = R @ p_source + t``.  A "camera pose" is camera-to-world.
* The world frame is z-up; gravity points along ``(0, 0, -1)`` in world
  coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAVITY_WORLD = np.array([0.0, 0.0, -1.0])

# Compositions tolerated before the quaternion is re-normalized.
_RENORM_EVERY = 10

_UNIT_TOL = 1e-9


class DegenerateGeometry(ValueError):
    """Raised for geometrically degenerate inputs (parallel rays, etc.)."""


def quat_identity() -> np.ndarray:
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the scalar-last quaternion with w >= 0."""
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("zero rotation axis")
    half = 0.5 * angle
    return np.concatenate([np.sin(half) * axis / n, [np.cos(half)]])


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Exponential map; safe for small angles."""
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        q = np.array([0.5 * v[0], 0.5 * v[1], 0.5 * v[2], 1.0])
        return quat_normalize(q)
    return quat_from_axis_angle(v, angle)


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    if q[3] < 0:
        q = -q
    angle = 2.0 * np.arccos(min(1.0, q[3]))
    s = np.linalg.norm(q[:3])
    if s < 1e-12:
        return 2.0 * q[:3]
    return q[:3] * (angle / s)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic rotation angle of a rotation matrix, in [0, pi]."""
    c = (np.trace(r) - 1.0) * 0.5
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def yaw_rotation(kappa: float) -> np.ndarray:
    c, s = np.cos(kappa), np.sin(kappa)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_aligning(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation R with R @ a == b for unit vectors a, b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        # 180 degrees: rotate about any axis orthogonal to a.
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return quat_to_matrix(quat_from_axis_angle(axis, np.pi))
    vx = skew(v)
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping source-frame points to the target frame."""

    q: np.ndarray  # unit quaternion, scalar-last
    t: np.ndarray  # translation, meters
    gen: int = field(default=0, compare=False)  # compositions since last renorm

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("pose needs q (4,) and t (3,)")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("quaternion not unit norm")

    @staticmethod
    def identity() -> "Pose":
        return Pose(quat_identity(), np.zeros(3))

    @staticmethod
    def from_rt(r: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(quat_from_matrix(np.asarray(r, dtype=float)), t)

    @property
    def r(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p @ self.r.T + self.t

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def compose(a: Pose, b: Pose) -> Pose:
    """a after b: compose(a, b).apply(p) == a.apply(b.apply(p))."""
    q = quat_mul(a.q, b.q)
    t = a.r @ b.t + a.t
    gen = max(a.gen, b.gen) + 1
    if gen >= _RENORM_EVERY:
        q = quat_normalize(q)
        gen = 0
    return Pose(q, t, gen)


def invert(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(qi, -(quat_to_matrix(qi) @ p.t), p.gen)


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics, pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def pixel_from_normalized(self, xn: np.ndarray) -> np.ndarray:
        xn = np.asarray(xn, dtype=float)
        return np.stack([self.fx * xn[..., 0] + self.cx,
                         self.fy * xn[..., 1] + self.cy], axis=-1)

    def normalized_from_pixel(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return np.stack([(px[..., 0] - self.cx) / self.fx,
                         (px[..., 1] - self.cy) / self.fy], axis=-1)

    def bearing_from_pixel(self, px: np.ndarray) -> np.ndarray:
        """Unit ray in the camera frame (+z forward)."""
        xn = self.normalized_from_pixel(px)
        v = np.concatenate([xn, np.ones(xn.shape[:-1] + (1,))], axis=-1)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def in_image(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return ((px[..., 0] >= 0) & (px[..., 0] < self.width)
                & (px[..., 1] >= 0) & (px[..., 1] < self.height))


def unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero vector has no direction")
    return v / n


def check_unit(v: np.ndarray, what: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError(f"{what} must be unit norm")
    return v


def project(cam: Camera, pose: Pose, point_world: np.ndarray):
    """Project a world point through a camera-to-world pose.

    Returns the pixel, or None when the point is at or behind the camera
    plane (z <= 0).  Raises DegenerateGeometry for a point at the optical
    center.
    """
    p_c = invert(pose).apply(point_world)
    if np.linalg.norm(p_c) < 1e-12:
        raise DegenerateGeometry("point at the optical center")
    if p_c[2] <= 0.0:
        return None
    return cam.pixel_from_normalized(p_c[:2] / p_c[2])


def project_many(cam: Camera, pose: Pose, points_world: np.ndarray):
    """Vectorized projection. Returns (pixels (n,2), valid mask (n,))."""
    pts = np.asarray(points_world, dtype=float)
    inv = invert(pose)
    p_c = pts @ inv.r.T + inv.t
    z = p_c[:, 2]
    valid = z > 1e-12
    zs = np.where(valid, z, 1.0)
    px = cam.pixel_from_normalized(p_c[:, :2] / zs[:, None])
    return px, valid


def triangulate(observations) -> np.ndarray:
    """Midpoint least-squares intersection of camera rays.

    ``observations`` is a sequence of (camera-to-world Pose, unit bearing in
    the camera frame) pairs.  Raises DegenerateGeometry for fewer than two
    rays or a (near-)parallel configuration.
    """
    if len(observations) < 2:
        raise DegenerateGeometry("need at least two observations")
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for pose, bearing in observations:
        d = pose.r @ check_unit(np.asarray(bearing, dtype=float), "bearing")
        c = pose.t
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ c
    # Rank < 3 means all rays share a direction (parallel).
    w = np.linalg.eigvalsh(a)
    if w[0] < 1e-9 * max(w[-1], 1.0):
        raise DegenerateGeometry("parallel rays cannot be triangulated")
    return np.linalg.solve(a, b)
