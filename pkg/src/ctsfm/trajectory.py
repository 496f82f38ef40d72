"""Continuous camera trajectories on R3 x SO(3) ("split") and on SE(3).

Both kinds store their control points the same way, one unit quaternion and
one position per knot, so the estimator can treat them uniformly. What a
control point means differs: for ``split`` the quaternions and positions feed
two independent splines, for ``se3`` they form control poses of one spline.
"""

from __future__ import annotations

import numpy as np

from . import lie
from .splines import (KnotGrid, R3Spline, Se3Spline, So3Spline, WindowBasis,
                      r3_window, rotate, rotate_inv, se3_window, so3_window)

GRAVITY = np.array([0.0, 0.0, -9.8065])

KINDS = ("split", "se3")


class Trajectory:
    kind = None

    def __init__(self, grid: KnotGrid, quats=None, positions=None, gravity=GRAVITY):
        self.grid = grid
        if quats is None:
            quats = lie.quat_identity((grid.count,))
        if positions is None:
            positions = np.zeros((grid.count, 3))
        self.quats = lie.sign_continuous(lie.quat_normalize(np.array(quats, dtype=float)))
        self.positions = np.array(positions, dtype=float)
        self.gravity = np.array(gravity, dtype=float)
        if self.quats.shape != (grid.count, 4) or self.positions.shape != (grid.count, 3):
            raise ValueError("control point arrays must match grid.count")

    @staticmethod
    def create(kind, grid, quats=None, positions=None, gravity=GRAVITY):
        cls = {"split": SplitTrajectory, "se3": Se3Trajectory}.get(kind)
        if cls is None:
            raise ValueError("unknown trajectory kind %r" % (kind,))
        return cls(grid, quats, positions, gravity)

    def copy(self):
        return type(self)(self.grid, self.quats.copy(), self.positions.copy(), self.gravity)

    @property
    def support(self):
        return self.grid.start, self.grid.end

    def _window(self, t):
        basis = WindowBasis.at(self.grid, np.atleast_1d(t))
        idx = basis.window_indices()
        return self.quats[idx], self.positions[idx], basis

    # ---- window-level kernels (overridden per kind) -------------------------

    def window_pose(self, Q, P, basis):
        raise NotImplementedError

    def window_pose_velocity(self, Q, P, basis):
        """Orientation, position, body angular velocity and global velocity."""
        raise NotImplementedError

    def window_gyro(self, Q, P, basis):
        raise NotImplementedError

    def window_accel(self, Q, P, basis):
        raise NotImplementedError

    # ---- public evaluation ---------------------------------------------------

    def poses(self, t):
        """Batched pose as ``(q, p)`` arrays."""
        return self.window_pose(*self._window(t))

    def pose(self, t) -> lie.Pose:
        q, p = self.poses(np.array([t], dtype=float))
        return lie.Pose(lie.quat_to_rotmat(q[0]), p[0])

    def pose_velocity(self, t):
        return self.window_pose_velocity(*self._window(t))

    def predict_gyro(self, t):
        out = self.window_gyro(*self._window(t))
        return out[0] if np.ndim(t) == 0 else out

    def predict_accel(self, t):
        out = self.window_accel(*self._window(t))
        return out[0] if np.ndim(t) == 0 else out

    def linear_acceleration(self, t):
        """The representation's own second derivative of position (global frame)."""
        raise NotImplementedError


class SplitTrajectory(Trajectory):
    kind = "split"

    @property
    def position_spline(self):
        return R3Spline(self.grid, self.positions)

    @property
    def orientation_spline(self):
        return So3Spline(self.grid, self.quats)

    def window_pose(self, Q, P, basis):
        return so3_window(Q, basis, 0)[0], r3_window(P, basis, 0)[0]

    def window_pose_velocity(self, Q, P, basis):
        q, w = so3_window(Q, basis, 1)
        p, v = r3_window(P, basis, 1)
        return q, p, w, v

    def window_gyro(self, Q, P, basis):
        return so3_window(Q, basis, 1)[1]

    def window_accel(self, Q, P, basis):
        q = so3_window(Q, basis, 0)[0]
        acc = np.einsum("nj,njk->nk", basis.ddb, P)
        return rotate_inv(q, acc - self.gravity)

    def linear_acceleration(self, t):
        return self.position_spline.eval(t, 2)


class Se3Trajectory(Trajectory):
    kind = "se3"

    @property
    def spline(self):
        return Se3Spline(self.grid, self.quats, self.positions)

    def window_pose(self, Q, P, basis):
        return tuple(se3_window(Q, P, basis, 0))

    def window_pose_velocity(self, Q, P, basis):
        q, p, v, w = se3_window(Q, P, basis, 1)
        return q, p, w, rotate(q, v)

    def window_gyro(self, Q, P, basis):
        return se3_window(Q, P, basis, 1)[3]

    def window_accel(self, Q, P, basis):
        q, p, v, w, vd, wd = se3_window(Q, P, basis, 2)
        # translation block of T * d(xi)/dt, rotated back to the body
        return vd - rotate_inv(q, self.gravity)

    def linear_acceleration(self, t):
        q, p, v, w, vd, wd = se3_window(*self._window(t), 2)
        out = rotate(q, vd)
        return out[0] if np.ndim(t) == 0 else out
