"""Minimal absolute-pose solvers.

``p2p_gravity`` solves for camera position and yaw from two 2D-3D
correspondences when the gravity direction is known in both the camera and
world frames (4 unknowns, 4 constraints, up to 2 solutions).

``p3p`` is the classical three-point resection: eliminate to a quartic in
the depth ratio, recover depths, then absolute orientation, up to 4 poses.

Both return camera-to-world poses whose reprojections reproduce noise-free
inputs to ~1e-6.
"""

from __future__ import annotations

from typing import List

import numpy as np
from numpy.polynomial import polynomial as npoly

from .geometry import (
    GRAVITY_WORLD,
    DegenerateGeometry,
    Pose,
    rotation_aligning,
)

_MIN_XY = 1e-9


def p2p_gravity(world_points: np.ndarray, bearings: np.ndarray,
                gravity_cam: np.ndarray,
                r0: np.ndarray = None) -> List[Pose]:
    """Two-point absolute pose under known gravity.

    world_points: (2, 3); bearings: (2, 3) unit rays in the camera frame;
    gravity_cam: unit gravity (down) direction in the camera frame.  ``r0``
    optionally carries the precomputed gravity-alignment rotation (callers
    solving many samples under one gravity reading).  Raises
    DegenerateGeometry when the landmarks are vertically collinear (yaw
    unobservable).
    """
    p = np.asarray(world_points, dtype=np.float64)
    f = np.asarray(bearings, dtype=np.float64)
    if p.shape != (2, 3) or f.shape != (2, 3):
        raise ValueError("p2p needs exactly two correspondences")
    if r0 is None:
        r0 = rotation_aligning(np.asarray(gravity_cam, dtype=np.float64),
                               GRAVITY_WORLD)
    u = f @ r0.T  # bearings in the gravity-rectified (yaw-free) frame
    dp = p[0] - p[1]
    if np.linalg.norm(dp[:2]) < _MIN_XY:
        raise DegenerateGeometry("landmarks vertically collinear: yaw unobservable")

    # depths l1, l2 with p1 - p2 = Rz(k) (l1 u1 - l2 u2):
    #   z:    dp_z           = l1 u1z - l2 u2z
    #   |xy|: |dp_xy|^2      = |l1 u1xy - l2 u2xy|^2
    swap = abs(u[0, 2]) < abs(u[1, 2])
    if swap:
        u = u[::-1]
        dp = -dp
    if abs(u[0, 2]) < 1e-12:
        # both rays horizontal: z equation cannot determine depths
        if abs(dp[2]) > 1e-9:
            return []
        raise DegenerateGeometry("both rays horizontal and coplanar with gravity")
    # l1 = (dp_z + l2 u2z) / u1z; substitute into the xy-norm equation
    a = u[0, :2] * (u[1, 2] / u[0, 2]) - u[1, :2]
    b = u[0, :2] * (dp[2] / u[0, 2])
    # |a*l2 + b|^2 = |dp_xy|^2
    ca = float(a @ a)
    cb = 2.0 * float(a @ b)
    cc = float(b @ b) - float(dp[:2] @ dp[:2])
    sols = []
    if abs(ca) < 1e-14:
        if abs(cb) > 1e-14:
            sols = [-cc / cb]
    else:
        disc = cb * cb - 4 * ca * cc
        if disc >= 0:
            r = np.sqrt(disc)
            sols = [(-cb - r) / (2 * ca), (-cb + r) / (2 * ca)]
    p_ord = p[::-1] if swap else p
    poses = []
    for l2 in sols:
        l1 = (dp[2] + l2 * u[1, 2]) / u[0, 2]
        if l1 <= 1e-9 or l2 <= 1e-9:
            continue
        v = l1 * u[0, :2] - l2 * u[1, :2]  # must rotate onto dp_xy
        if np.linalg.norm(v) < _MIN_XY:
            continue
        kappa = np.arctan2(dp[1], dp[0]) - np.arctan2(v[1], v[0])
        c, s = np.cos(kappa), np.sin(kappa)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        t = p_ord[0] - l1 * (rz @ u[0])
        poses.append(Pose.from_rt(rz @ r0, t))
    return poses


def p3p(world_points: np.ndarray, bearings: np.ndarray) -> List[Pose]:
    """Three-point absolute pose (calibrated).  Up to 4 solutions.

    Raises DegenerateGeometry for (near-)collinear world points.
    """
    p = np.asarray(world_points, dtype=np.float64)
    f = np.asarray(bearings, dtype=np.float64)
    if p.shape != (3, 3) or f.shape != (3, 3):
        raise ValueError("p3p needs exactly three correspondences")
    if np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0])) < 1e-9:
        raise DegenerateGeometry("collinear landmarks")
    f = f / np.linalg.norm(f, axis=1, keepdims=True)

    a = np.linalg.norm(p[1] - p[2])
    b = np.linalg.norm(p[0] - p[2])
    c = np.linalg.norm(p[0] - p[1])
    cos_al = float(f[1] @ f[2])
    cos_be = float(f[0] @ f[2])
    cos_ga = float(f[0] @ f[1])
    if min(a, b, c) < 1e-9:
        raise DegenerateGeometry("repeated landmarks")
    a2b = (a / b) ** 2
    c2b = (c / b) ** 2

    # s2 = u s1, s3 = v s1; two conics in (u, v):
    #  E1: u^2 + v^2 (1 - a2b) - 2 u v cos_al + 2 a2b cos_be v - a2b = 0
    #  E2: u^2 - 2 u cos_ga - c2b v^2 + 2 c2b cos_be v + 1 - c2b = 0
    # E1 - E2 is linear in u: u * g1(v) = g0(v)
    #   g1(v) = 2 (cos_ga - v cos_al)
    #   g0(v) = -(v^2 (1 - a2b + c2b) + 2 v cos_be (a2b - c2b) - a2b - 1 + c2b)
    g1 = np.array([2.0 * cos_ga, -2.0 * cos_al])  # coefficients in v
    g0 = -np.array([-a2b - 1.0 + c2b, 2.0 * cos_be * (a2b - c2b),
                    1.0 - a2b + c2b])
    # substitute u = g0/g1 into E2 * g1^2:
    #   g0^2 - 2 cos_ga g0 g1 + (-c2b v^2 + 2 c2b cos_be v + 1 - c2b) g1^2 = 0
    e2_poly = np.array([1.0 - c2b, 2.0 * c2b * cos_be, -c2b])
    quart = npoly.polyadd(
        npoly.polysub(npoly.polymul(g0, g0),
                      2.0 * cos_ga * npoly.polymul(g0, g1)),
        npoly.polymul(e2_poly, npoly.polymul(g1, g1)))
    roots = npoly.polyroots(quart)
    dquart = npoly.polyder(quart)
    poses = []
    seen = []
    for v in roots:
        if abs(v.imag) > 1e-8:
            continue
        v = float(v.real)
        if v <= 0:
            continue
        for _ in range(3):  # polish the root; polyroots alone is ~1e-7
            dv = npoly.polyval(v, dquart)
            if abs(dv) < 1e-14:
                break
            v -= npoly.polyval(v, quart) / dv
        den = float(npoly.polyval(v, g1))
        if abs(den) < 1e-12:
            continue
        uu = float(npoly.polyval(v, g0)) / den
        if uu <= 0:
            continue
        uu, v = _polish_uv(uu, v, a2b, c2b, cos_al, cos_be, cos_ga)
        if uu <= 0 or v <= 0:
            continue
        denom = 1.0 + v * v - 2.0 * v * cos_be
        if denom <= 1e-14:
            continue
        s1 = b / np.sqrt(denom)
        depths = np.array([s1, uu * s1, v * s1])
        if np.any(depths <= 0):
            continue
        pts_cam = depths[:, None] * f
        pose = _absolute_orientation(pts_cam, p)
        if pose is None:
            continue
        # keep solutions that actually reproject (spurious roots drop out)
        resid = _bearing_residual(pose, p, f)
        if resid > 1e-4:
            continue
        key = np.concatenate([pose.q, pose.t])
        if any(np.linalg.norm(key - k) < 1e-6 for k in seen):
            continue
        seen.append(key)
        poses.append(pose)
    return poses


def _polish_uv(u: float, v: float, a2b: float, c2b: float, cos_al: float,
               cos_be: float, cos_ga: float):
    """Newton iterations on the two depth-ratio conics."""
    for _ in range(5):
        e1 = u * u + v * v * (1 - a2b) - 2 * u * v * cos_al \
            + 2 * a2b * cos_be * v - a2b
        e2 = u * u - 2 * u * cos_ga - c2b * v * v + 2 * c2b * cos_be * v \
            + 1 - c2b
        j = np.array([
            [2 * u - 2 * v * cos_al,
             2 * v * (1 - a2b) - 2 * u * cos_al + 2 * a2b * cos_be],
            [2 * u - 2 * cos_ga, -2 * c2b * v + 2 * c2b * cos_be],
        ])
        det = j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0]
        if abs(det) < 1e-14:
            break
        du = (e1 * j[1, 1] - e2 * j[0, 1]) / det
        dv = (e2 * j[0, 0] - e1 * j[1, 0]) / det
        u, v = u - du, v - dv
        if abs(du) + abs(dv) < 1e-15:
            break
    return u, v


def _absolute_orientation(pts_src: np.ndarray, pts_dst: np.ndarray):
    """Rigid transform (no scale) mapping pts_src onto pts_dst (Kabsch)."""
    mu_s = pts_src.mean(axis=0)
    mu_d = pts_dst.mean(axis=0)
    h = (pts_src - mu_s).T @ (pts_dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_d - r @ mu_s
    if not np.isfinite(r).all() or not np.isfinite(t).all():
        return None
    return Pose.from_rt(r, t)


def _bearing_residual(pose: Pose, world_points: np.ndarray,
                      bearings: np.ndarray) -> float:
    r_cw = pose.r.T
    worst = 0.0
    for pw, f in zip(world_points, bearings):
        pc = r_cw @ (pw - pose.t)
        n = np.linalg.norm(pc)
        if n < 1e-12 or pc[2] <= 0:
            return np.inf
        worst = max(worst, float(np.linalg.norm(pc / n - f)))
    return worst
