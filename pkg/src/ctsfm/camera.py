"""Pinhole rolling-shutter camera, inverse-depth landmarks and projection methods.

A landmark is its reference observation ``y*`` (taken at ``ref_time``) plus an
inverse depth ``rho``. Transferring it to time ``t`` gives

    psi(t) = pi( T(t)^-1 T(ref_time) [pi^-1(y*); rho] )

and the rolling-shutter time deviation, in rows, is

    eps(t) = (t - t0) Nv / r - psi_v(t)

where ``t0`` is the start of the frame's readout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import rotate, rotate_inv, _cross

MIN_DEPTH = 1e-9
# lifted times may leave the readout window by this fraction of r
LIFT_MARGIN = 0.2


class BehindCameraError(ValueError):
    pass


class ProjectionTimeError(RuntimeError):
    pass


@dataclass(frozen=True)
class RsCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    Nu: int
    Nv: int
    readout: float
    frame_period: float

    def __post_init__(self):
        if self.Nv <= 0 or self.Nu <= 0:
            raise ValueError("image size must be positive")
        if not 0.0 <= self.readout <= self.frame_period:
            raise ValueError("readout time must lie in [0, frame_period]")

    def row_time(self, t0, v):
        return t0 + self.readout * np.asarray(v, dtype=float) / self.Nv

    def project(self, x_cam):
        x = np.asarray(x_cam, dtype=float)
        if np.any(x[..., 2] <= MIN_DEPTH):
            raise BehindCameraError("behind camera")
        return self._project(x)

    def _project(self, x):
        z = x[..., 2]
        return np.stack([self.fx * x[..., 0] / z + self.cx, self.fy * x[..., 1] / z + self.cy], axis=-1)

    def unproject(self, y, rho):
        """Homogeneous 4-vector ``[x/z, y/z, 1, rho]`` of pixel ``y``."""
        y = np.asarray(y, dtype=float)
        ray = self.ray(y)
        rho = np.broadcast_to(np.asarray(rho, dtype=float), ray.shape[:-1])
        return np.concatenate([ray, rho[..., None]], axis=-1)

    def ray(self, y):
        y = np.asarray(y, dtype=float)
        return np.stack([(y[..., 0] - self.cx) / self.fx, (y[..., 1] - self.cy) / self.fy,
                         np.ones(y.shape[:-1])], axis=-1)

    def in_image(self, uv):
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= 0) & (uv[..., 0] <= self.Nu)
                & (uv[..., 1] >= 0) & (uv[..., 1] <= self.Nv))


@dataclass
class Landmark:
    ref_frame: int
    ref_obs: np.ndarray
    inv_depth: float
    ref_time: float

    def __post_init__(self):
        self.ref_obs = np.asarray(self.ref_obs, dtype=float).reshape(2)
        if self.inv_depth < 0:
            raise ValueError("inverse depth must be non-negative")


@dataclass
class Observation:
    landmark: int
    frame: int
    uv: np.ndarray
    frame_time: float

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float).reshape(2)

    def time(self, camera: RsCamera):
        return float(camera.row_time(self.frame_time, self.uv[1]))


# --------------------------------------------------------------------------
# batched geometry
# --------------------------------------------------------------------------

def world_point(camera, q_ref, p_ref, y_ref, rho):
    """Homogeneous world point ``(h, rho)`` of landmarks; ``h = R_ref ray + p_ref rho``."""
    return rotate(q_ref, camera.ray(y_ref)) + p_ref * rho[:, None]


def camera_point(q, p, h, rho):
    return rotate_inv(q, h - p * rho[:, None])


def transfer_batch(camera, q_ref, p_ref, q, p, y_ref, rho):
    """Transferred pixels and camera-frame points for many landmarks."""
    h = world_point(camera, q_ref, p_ref, y_ref, rho)
    x = camera_point(q, p, h, rho)
    return camera._project(x), x


def transfer_rate(camera, x, omega, pdot_body, rho):
    """Pixel velocity given the camera point, body rate and body-frame velocity."""
    xd = -_cross(omega, x) - pdot_body * rho[:, None]
    z = x[:, 2]
    du = camera.fx * (xd[:, 0] * z - x[:, 0] * xd[:, 2]) / (z * z)
    dv = camera.fy * (xd[:, 1] * z - x[:, 1] * xd[:, 2]) / (z * z)
    return np.stack([du, dv], axis=-1)


def epsilon_rows(camera, t, t0, v):
    return (t - t0) * camera.Nv / camera.readout - v


def solve_projection_times(camera, pose_velocity, h, rho, t0, t_init, lo, hi,
                           tol=1e-2, max_iter=10, polish=False):
    """Vectorised Newton iteration on ``eps(t) = 0`` with bisection fallback.

    ``pose_velocity(t, idx)`` must return ``q, p, omega_body, pdot_world`` for
    the rows ``idx``. With ``polish`` every row takes one more Newton step
    after reaching ``tol``, which brings it to quadratic-convergence accuracy.
    Returns ``(t, uv, iterations, ok)``; ``iterations`` counts Newton steps per
    row (bisection rows report ``max_iter + 1``).
    """
    n = len(t0)
    t = np.clip(np.asarray(t_init, dtype=float).copy(), lo, hi)
    iters = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    uv = np.zeros((n, 2))
    eps = np.full(n, np.inf)
    scale = camera.Nv / camera.readout
    polished = np.full(n, not polish)
    for _ in range(max_iter + 2):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        q, p, w, pd = pose_velocity(t[idx], idx)
        x = camera_point(q, p, h[idx], rho[idx])
        good_z = x[:, 2] > MIN_DEPTH
        proj = camera._project(np.where(good_z[:, None], x, np.array([0.0, 0.0, 1.0])))
        uv[idx] = proj
        e = (t[idx] - t0[idx]) * scale - proj[:, 1]
        eps[idx] = np.where(good_z, e, np.inf)
        done = good_z & (np.abs(e) <= tol)
        finish = done & (polished[idx] | (np.abs(e) <= 1e-10))
        active[idx[finish]] = False
        still = ~done & good_z & (iters[idx] < max_iter)
        active[idx[~done & ~still]] = False
        step_rows = still | (done & ~finish)
        if not np.any(step_rows):
            break
        sidx = idx[step_rows]
        polished[sidx] |= done[step_rows]
        rate = transfer_rate(camera, x[step_rows], w[step_rows], rotate_inv(q[step_rows], pd[step_rows]),
                             rho[sidx])
        de = scale - rate[:, 1]
        step = e[step_rows] / np.where(np.abs(de) > 1e-12, de, 1e-12)
        t[sidx] = np.clip(t[sidx] - step, lo[sidx], hi[sidx])
        iters[sidx] += 1
    ok = np.abs(eps) <= tol
    bad = np.flatnonzero(~ok)
    if len(bad):
        tb, uvb, okb = _bisect_times(camera, pose_velocity, h, rho, t0, lo, hi, bad, tol)
        t[bad] = tb
        uv[bad] = uvb
        ok[bad] = okb
        iters[bad] = max_iter + 1
    return t, uv, iters, ok


def _bisect_times(camera, pose_velocity, h, rho, t0, lo, hi, idx, tol):
    scale = camera.Nv / camera.readout

    def eps_at(t):
        q, p, _, _ = pose_velocity(t, idx)
        x = camera_point(q, p, h[idx], rho[idx])
        good = x[:, 2] > MIN_DEPTH
        proj = camera._project(np.where(good[:, None], x, np.array([0.0, 0.0, 1.0])))
        return (t - t0[idx]) * scale - proj[:, 1], proj, good

    a = lo[idx].copy()
    b = hi[idx].copy()
    ea, _, ga = eps_at(a)
    eb, _, gb = eps_at(b)
    bracket = ga & gb & (np.sign(ea) != np.sign(eb))
    for _ in range(80):
        m = 0.5 * (a + b)
        em, _, gm = eps_at(m)
        left = np.sign(em) == np.sign(ea)
        a = np.where(left, m, a)
        ea = np.where(left, em, ea)
        b = np.where(left, b, m)
        if np.all(np.abs(b - a) < 1e-14):
            break
    t = 0.5 * (a + b)
    e, uv, good = eps_at(t)
    return t, uv, bracket & good & (np.abs(e) <= tol)


# --------------------------------------------------------------------------
# scalar API
# --------------------------------------------------------------------------

def _ref_pose(traj, landmark):
    q, p = traj.poses(np.array([landmark.ref_time]))
    return q, p


def transfer(camera: RsCamera, traj, landmark: Landmark, t: float):
    """Reference observation of ``landmark`` transferred to time ``t``."""
    q_ref, p_ref = _ref_pose(traj, landmark)
    q, p = traj.poses(np.array([t], dtype=float))
    uv, x = transfer_batch(camera, q_ref, p_ref, q, p, landmark.ref_obs[None],
                           np.array([landmark.inv_depth]))
    if x[0, 2] <= MIN_DEPTH:
        raise BehindCameraError("behind camera")
    return uv[0]


def transfer_velocity(camera, traj, landmark, t):
    """Pixel rate d psi / dt at time ``t``."""
    q_ref, p_ref = _ref_pose(traj, landmark)
    rho = np.array([landmark.inv_depth])
    h = world_point(camera, q_ref, p_ref, landmark.ref_obs[None], rho)
    q, p, w, pd = traj.pose_velocity(np.array([t], dtype=float))
    x = camera_point(q, p, h, rho)
    return transfer_rate(camera, x, w, rotate_inv(q, pd), rho)[0]


def epsilon(camera: RsCamera, traj, landmark: Landmark, frame_time: float, t: float):
    """Rolling-shutter time deviation in rows."""
    if camera.readout == 0:
        raise ValueError("undefined for global shutter")
    return float(epsilon_rows(camera, t, frame_time, transfer(camera, traj, landmark, t)[1]))


def project_static(camera: RsCamera, traj, landmark: Landmark, obs: Observation):
    """Transfer evaluated at the observed row's time."""
    return transfer(camera, traj, landmark, obs.time(camera))


def project_newton(camera: RsCamera, traj, landmark: Landmark, frame_time: float,
                   t_init=None, tol=1e-2, max_iter=10, return_info=False):
    """Projection that satisfies the rolling-shutter constraint to ``tol`` rows."""
    if camera.readout == 0:
        uv = transfer(camera, traj, landmark, frame_time)
        return (uv, frame_time, 0) if return_info else uv
    q_ref, p_ref = _ref_pose(traj, landmark)
    rho = np.array([landmark.inv_depth])
    h = world_point(camera, q_ref, p_ref, landmark.ref_obs[None], rho)
    t0 = np.array([frame_time], dtype=float)
    if t_init is None:
        t_init = frame_time + 0.5 * camera.readout
    lo = t0.copy()
    hi = t0 + camera.readout

    def pv(t, idx):
        return traj.pose_velocity(t)

    t, uv, iters, ok = solve_projection_times(
        camera, pv, h, rho, t0, np.array([t_init], dtype=float), lo, hi, tol, max_iter, polish=True)
    if not ok[0]:
        raise ProjectionTimeError("projection time not found")
    if return_info:
        return uv[0], float(t[0]), int(iters[0])
    return uv[0]


def lifting_residuals(camera: RsCamera, traj, landmark: Landmark, obs: Observation, t_lift: float):
    """Reprojection residual ``y_obs - psi(t_lift)`` and time residual ``eps(t_lift)``."""
    lo = obs.frame_time - LIFT_MARGIN * camera.readout
    hi = obs.frame_time + (1 + LIFT_MARGIN) * camera.readout
    if not lo - 1e-12 <= t_lift <= hi + 1e-12:
        raise ValueError("lifted time outside the readout window")
    uv = transfer(camera, traj, landmark, t_lift)
    if camera.readout == 0:
        # global shutter: the constraint is vacuous once t_lift = t0
        return obs.uv - uv, 0.0
    return obs.uv - uv, float(epsilon_rows(camera, t_lift, obs.frame_time, uv[1]))
