"""Uniform cubic B-splines in cumulative form on R3, SO(3) and SE(3).

Control point ``k`` sits at knot ``t0 + k * dt``. Segment ``i`` is driven by
control points ``i .. i+3`` and covers ``[t0 + (i+1) dt, t0 + (i+2) dt)``.

The window kernels (``r3_window``, ``so3_window``, ``se3_window``) take the
four active control points of many evaluation times at once. The estimator
calls them directly on perturbed copies of the control points when it builds
Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie

# Uniform cubic B-spline blending matrix: B_j(u) = BASIS[j] . (1, u, u^2, u^3)
BASIS = np.array([
    [1.0, -3.0, 3.0, -1.0],
    [4.0, 0.0, -6.0, 3.0],
    [1.0, 3.0, 3.0, -3.0],
    [0.0, 0.0, 0.0, 1.0],
]) / 6.0
# cumulative weights: CUMULATIVE[j] = sum_{l >= j} BASIS[l]
# (rounded to exact sixths so that the leading weight is exactly 1)
CUMULATIVE = np.round(6.0 * np.cumsum(BASIS[::-1], axis=0)[::-1]) / 6.0


class SupportError(ValueError):
    """Raised when a spline is evaluated outside its valid time interval."""


@dataclass(frozen=True)
class KnotGrid:
    t0: float
    dt: float
    count: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("knot spacing must be positive")
        if self.count < 4:
            raise ValueError("a cubic spline needs at least 4 control points")

    @property
    def start(self):
        return self.t0 + self.dt

    @property
    def end(self):
        return self.t0 + (self.count - 2) * self.dt

    @classmethod
    def covering(cls, a, b, dt):
        """Grid whose support contains ``[a - dt, b + dt]``."""
        t0 = a - 2.0 * dt
        count = int(np.ceil((b + dt - t0) / dt - 1e-9)) + 2
        return cls(float(t0), float(dt), max(count, 4))

    def locate(self, t):
        """Segment index and normalised position ``u`` for times ``t``."""
        t = np.asarray(t, dtype=float)
        s = (t - self.t0) / self.dt - 1.0
        nseg = self.count - 3
        tol = 1e-9
        if np.any(s < -tol) or np.any(s > nseg + tol):
            bad = t[(s < -tol) | (s > nseg + tol)]
            raise SupportError(
                "out of spline support: t=%r not in [%r, %r]" % (bad.ravel()[:3], self.start, self.end))
        seg = np.clip(np.floor(s).astype(int), 0, nseg - 1)
        u = s - seg
        return seg, u

    def contains(self, t):
        s = (np.asarray(t, dtype=float) - self.t0) / self.dt - 1.0
        return (s >= 0.0) & (s <= self.count - 3)


def _powers(u):
    u = np.asarray(u, dtype=float)
    one = np.ones_like(u)
    zero = np.zeros_like(u)
    p = np.stack([one, u, u * u, u * u * u], axis=-1)
    dp = np.stack([zero, one, 2 * u, 3 * u * u], axis=-1)
    ddp = np.stack([zero, zero, 2 * one, 6 * u], axis=-1)
    return p, dp, ddp


@dataclass
class CumulativeBasis:
    btilde: np.ndarray
    dbtilde: np.ndarray
    ddbtilde: np.ndarray
    segment: int
    u: float


def cumulative_basis(grid: KnotGrid, t: float) -> CumulativeBasis:
    seg, u = grid.locate(np.array([t]))
    p, dp, ddp = _powers(u[0])
    return CumulativeBasis(
        btilde=CUMULATIVE @ p,
        dbtilde=CUMULATIVE @ dp / grid.dt,
        ddbtilde=CUMULATIVE @ ddp / grid.dt ** 2,
        segment=int(seg[0]),
        u=float(u[0]),
    )


@dataclass
class WindowBasis:
    """Precomputed basis weights for a batch of evaluation times.

    ``b*`` are the ordinary weights, ``bt*`` the cumulative ones; ``d`` and
    ``dd`` prefixes are first and second time derivatives.
    """

    seg: np.ndarray
    u: np.ndarray
    b: np.ndarray
    db: np.ndarray
    ddb: np.ndarray
    bt: np.ndarray
    dbt: np.ndarray
    ddbt: np.ndarray

    @classmethod
    def at(cls, grid: KnotGrid, t):
        seg, u = grid.locate(np.atleast_1d(t))
        return cls._build(grid, seg, u)

    @classmethod
    def on_segment(cls, grid: KnotGrid, t, seg):
        """Weights for times ``t`` using the polynomial of segment ``seg``.

        ``u`` is not clipped, so slightly out-of-segment times continue the
        segment polynomial (used for finite differences).
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        u = (t - grid.t0) / grid.dt - 1.0 - seg
        return cls._build(grid, np.asarray(seg), u)

    @classmethod
    def _build(cls, grid, seg, u):
        p, dp, ddp = _powers(u)
        inv = 1.0 / grid.dt
        return cls(
            seg=seg, u=u,
            b=p @ BASIS.T, db=dp @ BASIS.T * inv, ddb=ddp @ BASIS.T * inv * inv,
            bt=p @ CUMULATIVE.T, dbt=dp @ CUMULATIVE.T * inv, ddbt=ddp @ CUMULATIVE.T * inv * inv,
        )

    def __len__(self):
        return len(self.seg)

    def subset(self, idx):
        return WindowBasis(*(getattr(self, f)[idx] for f in
                             ("seg", "u", "b", "db", "ddb", "bt", "dbt", "ddbt")))

    def tile(self, reps):
        """Basis repeated ``reps`` times along the batch axis."""
        return WindowBasis(*(np.tile(getattr(self, f), (reps,) + (1,) * (getattr(self, f).ndim - 1))
                             for f in ("seg", "u", "b", "db", "ddb", "bt", "dbt", "ddbt")))

    def window_indices(self):
        return self.seg[:, None] + np.arange(4)


# --------------------------------------------------------------------------
# window kernels
# --------------------------------------------------------------------------

def _cross(a, b):
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def rotate(q, v):
    """Rotate ``v`` by unit quaternion ``q`` (batched)."""
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * _cross(u, v)
    return v + w * t + _cross(u, t)


def rotate_inv(q, v):
    w = q[..., :1]
    u = -q[..., 1:]
    t = 2.0 * _cross(u, v)
    return v + w * t + _cross(u, t)


def r3_window(P, basis: WindowBasis, order=0):
    """Position (and derivatives up to ``order``) from window control points ``P`` (N,4,3)."""
    out = [np.einsum("nj,njk->nk", basis.b, P)]
    if order >= 1:
        out.append(np.einsum("nj,njk->nk", basis.db, P))
    if order >= 2:
        out.append(np.einsum("nj,njk->nk", basis.ddb, P))
    return out


def so3_window(Q, basis: WindowBasis, order=0):
    """Orientation, body angular velocity and its derivative.

    Q: (N,4,4) window control quaternions. Returns ``[q]``, ``[q, omega]`` or
    ``[q, omega, omega_dot]`` with body-frame rates.
    """
    q = Q[:, 0]
    n = len(q)
    omega = np.zeros((n, 3))
    omega_dot = np.zeros((n, 3))
    for j in (1, 2, 3):
        d = lie.quat_log(lie.quat_mul(lie.quat_conj(Q[:, j - 1]), Q[:, j]))
        a = lie.quat_exp(basis.bt[:, j, None] * d)
        q = lie.quat_mul(q, a)
        if order >= 1:
            rotated = rotate_inv(a, omega)
            if order >= 2:
                omega_dot = (rotate_inv(a, omega_dot)
                             - basis.dbt[:, j, None] * _cross(d, rotated)
                             + basis.ddbt[:, j, None] * d)
            omega = rotated + basis.dbt[:, j, None] * d
    out = [q]
    if order >= 1:
        out.append(omega)
    if order >= 2:
        out.append(omega_dot)
    return out


def se3_window(Q, P, basis: WindowBasis, order=0):
    """SE(3) cumulative spline on window control poses.

    Returns ``[q, p]``, plus the body twist ``(v, omega)`` for ``order >= 1``
    and its time derivative ``(v_dot, omega_dot)`` for ``order >= 2``.
    """
    q = Q[:, 0]
    p = P[:, 0]
    n = len(q)
    v = np.zeros((n, 3))
    w = np.zeros((n, 3))
    vd = np.zeros((n, 3))
    wd = np.zeros((n, 3))
    for j in (1, 2, 3):
        q_prev = Q[:, j - 1]
        q_rel = lie.quat_mul(lie.quat_conj(q_prev), Q[:, j])
        p_rel = rotate_inv(q_prev, P[:, j] - P[:, j - 1])
        phi = lie.quat_log(q_rel)
        vel = np.einsum("nij,nj->ni", lie.so3_left_jacobian_inv(phi), p_rel)
        bt = basis.bt[:, j, None]
        a_q = lie.quat_exp(bt * phi)
        a_t = np.einsum("nij,nj->ni", lie.so3_left_jacobian(bt * phi), bt * vel)
        p = p + rotate(q, a_t)
        q = lie.quat_mul(q, a_q)
        if order >= 1:
            # Ad_{A^-1} applied to the accumulated twist
            rw = rotate_inv(a_q, w)
            rv = rotate_inv(a_q, v - _cross(a_t, w))
            dbt = basis.dbt[:, j, None]
            if order >= 2:
                rwd = rotate_inv(a_q, wd)
                rvd = rotate_inv(a_q, vd - _cross(a_t, wd))
                # ad_Omega(v2, w2) = (phi x v2 - w2 x vel, phi x w2)
                vd = rvd - dbt * (_cross(phi, rv) - _cross(rw, vel)) + basis.ddbt[:, j, None] * vel
                wd = rwd - dbt * _cross(phi, rw) + basis.ddbt[:, j, None] * phi
            v = rv + dbt * vel
            w = rw + dbt * phi
    out = [q, p]
    if order >= 1:
        out += [v, w]
    if order >= 2:
        out += [vd, wd]
    return out


# --------------------------------------------------------------------------
# spline containers
# --------------------------------------------------------------------------

def _gather(ctrl, basis):
    return ctrl[basis.window_indices()]


class R3Spline:
    def __init__(self, grid: KnotGrid, points):
        self.grid = grid
        self.points = np.array(points, dtype=float).reshape(-1, 3)
        if len(self.points) != grid.count:
            raise ValueError("control point count must equal grid.count")

    def eval(self, t, order=0):
        """Position, velocity or acceleration at ``t`` (scalar or array)."""
        scalar = np.ndim(t) == 0
        basis = WindowBasis.at(self.grid, t)
        res = r3_window(_gather(self.points, basis), basis, order)[order]
        return res[0] if scalar else res

    def eval_cumulative(self, t, order=0):
        """Same value via the cumulative form p_1 B~_1 + sum (p_k - p_{k-1}) B~_k."""
        scalar = np.ndim(t) == 0
        basis = WindowBasis.at(self.grid, t)
        P = _gather(self.points, basis)
        diffs = np.concatenate([P[:, :1], np.diff(P, axis=1)], axis=1)
        w = (basis.bt, basis.dbt, basis.ddbt)[order]
        res = np.einsum("nj,njk->nk", w, diffs)
        return res[0] if scalar else res


class So3Spline:
    def __init__(self, grid: KnotGrid, quats):
        self.grid = grid
        q = lie.quat_normalize(np.array(quats, dtype=float).reshape(-1, 4))
        if len(q) != grid.count:
            raise ValueError("control point count must equal grid.count")
        self.quats = lie.sign_continuous(q)

    def rates(self, t, order=2):
        basis = WindowBasis.at(self.grid, np.atleast_1d(t))
        return so3_window(_gather(self.quats, basis), basis, order)

    def eval(self, t):
        """Orientation ``q``, its rate ``dq`` and second rate ``ddq``."""
        scalar = np.ndim(t) == 0
        q, w, wd = self.rates(t, 2)
        zero = np.zeros((len(q), 1))
        qw = np.concatenate([zero, w], axis=-1)
        qwd = np.concatenate([zero, wd], axis=-1)
        dq = 0.5 * lie.quat_mul(q, qw)
        ddq = 0.5 * lie.quat_mul(dq, qw) + 0.5 * lie.quat_mul(q, qwd)
        if scalar:
            return q[0], dq[0], ddq[0]
        return q, dq, ddq


class Se3Spline:
    """Cumulative spline over control poses stored as (quaternion, position)."""

    def __init__(self, grid: KnotGrid, quats, positions):
        self.grid = grid
        q = lie.quat_normalize(np.array(quats, dtype=float).reshape(-1, 4))
        self.quats = lie.sign_continuous(q)
        self.positions = np.array(positions, dtype=float).reshape(-1, 3)
        if len(self.quats) != grid.count or len(self.positions) != grid.count:
            raise ValueError("control point count must equal grid.count")

    @classmethod
    def from_poses(cls, grid, poses):
        quats = lie.rotmat_to_quat(np.stack([T.R for T in poses]))
        return cls(grid, quats, np.stack([T.p for T in poses]))

    def check_branch(self):
        rel = lie.quat_mul(lie.quat_conj(self.quats[:-1]), self.quats[1:])
        angle = np.linalg.norm(lie.quat_log(rel), axis=-1)
        if np.any(angle >= lie.LOG_BRANCH_LIMIT):
            raise lie.LogBranchError("log branch boundary between adjacent control poses")

    def twists(self, t, order=2):
        basis = WindowBasis.at(self.grid, np.atleast_1d(t))
        return se3_window(_gather(self.quats, basis), _gather(self.positions, basis), basis, order)

    def eval(self, t):
        """Pose, first rate ``dT = T xi^`` and second rate ``ddT = T d(xi^)/dt`` (4x4).

        ``xi`` is the body twist ``T^-1 dT/dt``. The second rate is the
        derivative of the twist carried to the global frame; it omits the
        ``T xi^ xi^`` term, so its translation block is not the kinematic
        acceleration of the position curve unless the orientation is constant.
        """
        self.check_branch()
        scalar = np.ndim(t) == 0
        q, p, v, w, vd, wd = self.twists(t, 2)
        R = lie.quat_to_rotmat(q)
        n = len(q)
        T = np.zeros((n, 4, 4))
        T[:, :3, :3] = R
        T[:, :3, 3] = p
        T[:, 3, 3] = 1.0
        xi = np.zeros((n, 4, 4))
        xi[:, :3, :3] = lie.skew(w)
        xi[:, :3, 3] = v
        xid = np.zeros((n, 4, 4))
        xid[:, :3, :3] = lie.skew(wd)
        xid[:, :3, 3] = vd
        dT = T @ xi
        ddT = T @ xid
        if scalar:
            return lie.Pose(R[0], p[0]), dT[0], ddT[0]
        return [lie.Pose(R[i], p[i]) for i in range(n)], dT, ddT

    def kinematic_acceleration(self, t):
        """Exact second derivative of the position curve, ``R (v_dot + omega x v)``."""
        q, p, v, w, vd, wd = self.twists(t, 2)
        acc = rotate(q, vd + _cross(w, v))
        return acc[0] if np.ndim(t) == 0 else acc
