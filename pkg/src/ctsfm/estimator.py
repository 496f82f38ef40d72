"""Continuous-time rolling-shutter bundle adjustment with IMU residuals.

Cost::

    sum_obs huber(|y - psi|) + sum_gyro |w_m - b_g - w(t)|^2_Wg
        + sum_acc |a_m - b_a - a(t)|^2_Wa (+ sum (eps / sigma_eps)^2 for lifting)

Parameters are the trajectory control points (6-DOF tangent update each),
one inverse depth per landmark, one time per observation when lifting, and
optionally the IMU biases. Jacobians are central differences taken locally
on the four control points of each evaluation window; all perturbations of a
residual type are stacked into one batched kernel call. For Newton
projection the difference quotient is taken through one Newton step from the
converged time, so it carries the derivative of the projection time.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import lie
from .camera import LIFT_MARGIN, MIN_DEPTH, RsCamera, camera_point, solve_projection_times, transfer_rate
from .splines import KnotGrid, WindowBasis, rotate, rotate_inv
from .trajectory import Trajectory

log = logging.getLogger(__name__)

PROJECTIONS = ("static", "newton", "lifting")
KEYFRAME_STEP = 10
MAX_PER_KEYFRAME = 100
SUPPRESSION_GRID = 10


class DivergedError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    max_iterations: int = 50
    huber_c: float = 1.0
    function_tolerance: float = 1e-8
    initial_damping: float = 1e-4
    linear_solver: str = "sparse"
    # estimator-side Newton tolerance (rows); tight so the cost is smooth
    newton_tolerance: float = 1e-8
    newton_max_iterations: int = 10
    time_sigma: float = 1.0
    fd_step: float = 1e-6
    optimize_biases: bool = False

    def __post_init__(self):
        for name in ("max_iterations", "huber_c", "function_tolerance", "initial_damping",
                     "newton_tolerance", "newton_max_iterations", "time_sigma", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError("%s must be positive" % name)
        if self.linear_solver not in ("sparse", "dense"):
            raise ValueError("linear_solver must be 'sparse' or 'dense'")


@dataclass
class IterationLog:
    records: list = field(default_factory=list)

    def append(self, iteration, cost, cost0, wall, counts):
        rec = dict(iteration=iteration, cost=float(cost),
                   relative_cost=float(cost / cost0) if cost0 > 0 else 0.0, wall_ms=1e3 * wall)
        rec.update(counts)
        self.records.append(rec)

    @property
    def costs(self):
        return np.array([r["cost"] for r in self.records])

    @property
    def relative_costs(self):
        return np.array([r["relative_cost"] for r in self.records])

    @property
    def iteration_times(self):
        """Wall time (s) of every iteration after the initial evaluation."""
        return np.array([r["wall_ms"] for r in self.records[1:]]) * 1e-3

    def __len__(self):
        return len(self.records)


@dataclass
class Problem:
    camera: RsCamera
    trajectory: Trajectory
    method: str
    lm_ids: np.ndarray
    ref_frame: np.ndarray
    ref_uv: np.ndarray
    ref_time: np.ndarray
    rho: np.ndarray
    obs_lm: np.ndarray
    obs_frame: np.ndarray
    obs_uv: np.ndarray
    obs_t0: np.ndarray
    t_lift: np.ndarray
    gyro_t: np.ndarray
    gyro: np.ndarray
    accel_t: np.ndarray
    accel: np.ndarray
    W_g: np.ndarray
    W_a: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    keyframes: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.method not in PROJECTIONS:
            raise ValueError("unknown projection method %r" % (self.method,))
        if len(self.obs_lm) == 0:
            raise ValueError("no observations")
        if len(self.gyro_t) == 0 or len(self.accel_t) == 0:
            raise ValueError("empty IMU stream")
        grid = self.trajectory.grid
        for name, t in (("gyro", self.gyro_t), ("accel", self.accel_t), ("reference", self.ref_time),
                        ("observation", self.obs_t)):
            if not np.all(grid.contains(t)):
                raise ValueError("%s times outside the trajectory support" % name)
        counts = np.bincount(self.obs_lm, minlength=len(self.lm_ids))
        if np.any(counts < 1):
            raise ValueError("every landmark needs an observation besides its reference")

    @property
    def obs_t(self):
        """Observed-row capture times."""
        return self.camera.row_time(self.obs_t0, self.obs_uv[:, 1])

    @property
    def n_ctrl(self):
        return self.trajectory.grid.count

    def layout(self, config: SolverConfig):
        K, M, O = self.n_ctrl, len(self.rho), len(self.obs_lm)
        off = {"ctrl": 0, "rho": 6 * K, "t": 6 * K + M}
        n = 6 * K + M
        if self.method == "lifting":
            n += O
        off["bias"] = n
        if config.optimize_biases:
            n += 6
        off["n"] = n
        return off

    def lift_bounds(self):
        lo = self.obs_t0 - LIFT_MARGIN * self.camera.readout
        hi = self.obs_t0 + (1 + LIFT_MARGIN) * self.camera.readout
        g = self.trajectory.grid
        return np.maximum(lo, g.start), np.minimum(hi, g.end)

    def with_params(self, trajectory, rho, t_lift, gyro_bias, accel_bias):
        out = replace(self, trajectory=trajectory, rho=rho, t_lift=t_lift,
                      gyro_bias=gyro_bias, accel_bias=accel_bias, cache={})
        # fixed-time bases do not depend on the parameters
        for key in ("ref_basis", "gyro_basis", "accel_basis", "static_basis", "ray", "L_g", "L_a"):
            if key in self.cache:
                out.cache[key] = self.cache[key]
        return out

    def _cached(self, key, fn):
        if key not in self.cache:
            self.cache[key] = fn()
        return self.cache[key]


# --------------------------------------------------------------------------
# problem construction
# --------------------------------------------------------------------------

def select_keyframe_observations(dataset, step=KEYFRAME_STEP, max_per_keyframe=MAX_PER_KEYFRAME,
                                 grid=SUPPRESSION_GRID):
    """Deterministic keyframe observation selection.

    Every ``step``-th frame is a keyframe. Per keyframe the image is split
    into ``grid x grid`` buckets; the observation with the longest track
    (counted in keyframes) wins each bucket, then the rest is filled by track
    length up to ``max_per_keyframe``. Returns ``(keyframe ids, [(landmark,
    frame, u, v), ...])``.
    """
    frames = sorted(dataset.frames, key=lambda f: f.t0)
    kf = [f.id for f in frames[::step]]
    kf_set = set(kf)
    cam = dataset.metadata.camera
    per_kf = {k: [] for k in kf}
    length = {}
    for tr in dataset.tracks:
        rows = [(fid, u, v) for fid, u, v in tr.obs if fid in kf_set]
        length[tr.landmark] = len(rows)
        for fid, u, v in rows:
            per_kf[fid].append((tr.landmark, u, v))
    chosen = []
    for k in kf:
        cands = [c for c in per_kf[k] if length[c[0]] >= 2]
        cands.sort(key=lambda c: (-length[c[0]], c[0]))
        buckets = set()
        winners = []
        for lm, u, v in cands:
            b = (min(int(u / cam.Nu * grid), grid - 1), min(int(v / cam.Nv * grid), grid - 1))
            if b not in buckets:
                buckets.add(b)
                winners.append((lm, u, v))
        sel = winners[:max_per_keyframe]
        taken = {c[0] for c in sel}
        for c in cands:
            if len(sel) >= max_per_keyframe:
                break
            if c[0] not in taken:
                sel.append(c)
                taken.add(c[0])
        chosen += [(lm, k, u, v) for lm, u, v in sel]
    counts = {}
    for lm, *_ in chosen:
        counts[lm] = counts.get(lm, 0) + 1
    chosen = [c for c in chosen if counts[c[0]] >= 2]
    return np.array(kf), chosen


def data_span(dataset):
    imu = dataset.imu_array()
    ft = dataset.frame_times()
    r = dataset.metadata.camera.readout
    return min(imu[0, 0], ft[0]) - r, max(imu[-1, 0], ft[-1] + r) + r


def build_problem(dataset, trajectory_kind, projection_method, sew_result) -> Problem:
    """Cold-start problem: p = 0, R = I, every landmark at infinity."""
    if projection_method not in PROJECTIONS:
        raise ValueError("unknown projection method %r" % (projection_method,))
    meta = dataset.metadata
    c = meta.camera
    cam = RsCamera(c.fx, c.fy, c.cx, c.cy, c.Nu, c.Nv, c.readout, c.frame_period)
    imu = dataset.imu_array()
    if len(imu) == 0:
        raise ValueError("empty IMU stream")
    kf, chosen = select_keyframe_observations(dataset)
    if not chosen:
        raise ValueError("no observations")
    t0_of = {f.id: f.t0 for f in dataset.frames}
    chosen.sort(key=lambda c: (c[0], t0_of[c[1]]))
    lm_ids = sorted({c[0] for c in chosen})
    index = {lm: i for i, lm in enumerate(lm_ids)}
    ref_frame, ref_uv, ref_time = [], [], []
    obs_lm, obs_frame, obs_uv, obs_t0 = [], [], [], []
    seen = set()
    for lm, fid, u, v in chosen:
        if lm not in seen:
            seen.add(lm)
            ref_frame.append(fid)
            ref_uv.append((u, v))
            ref_time.append(float(cam.row_time(t0_of[fid], v)))
        else:
            obs_lm.append(index[lm])
            obs_frame.append(fid)
            obs_uv.append((u, v))
            obs_t0.append(t0_of[fid])
    a, b = data_span(dataset)
    grid = KnotGrid.covering(a, b, sew_result.dt)
    traj = Trajectory.create(trajectory_kind, grid, gravity=np.array(meta.gravity))
    obs_uv = np.array(obs_uv, dtype=float)
    obs_t0 = np.array(obs_t0, dtype=float)
    return Problem(
        camera=cam, trajectory=traj, method=projection_method,
        lm_ids=np.array(lm_ids), ref_frame=np.array(ref_frame), ref_uv=np.array(ref_uv, dtype=float),
        ref_time=np.array(ref_time), rho=np.zeros(len(lm_ids)),
        obs_lm=np.array(obs_lm, dtype=int), obs_frame=np.array(obs_frame), obs_uv=obs_uv, obs_t0=obs_t0,
        t_lift=cam.row_time(obs_t0, obs_uv[:, 1]),
        gyro_t=imu[:, 0], gyro=imu[:, 1:4], accel_t=imu[:, 0], accel=imu[:, 4:7],
        W_g=np.asarray(sew_result.W_g, dtype=float), W_a=np.asarray(sew_result.W_a, dtype=float),
        gyro_bias=np.array(meta.gyro_bias, dtype=float), accel_bias=np.array(meta.accel_bias, dtype=float),
        keyframes=kf)


# --------------------------------------------------------------------------
# residual kernels
# --------------------------------------------------------------------------

def _sqrt_info(W):
    return np.linalg.cholesky(W).T


def _safe_project(cam, x):
    ok = x[:, 2] > MIN_DEPTH
    return cam._project(np.where(ok[:, None], x, np.array([0.0, 0.0, 1.0]))), ok


def huber(norm, c=1.0):
    """Huber cost of residual norms: quadratic up to ``c``, linear beyond."""
    norm = np.asarray(norm, dtype=float)
    return np.where(norm <= c, norm * norm, 2.0 * c * norm - c * c)


_AXES = np.eye(3)


def _tile(a, reps):
    return np.tile(a, (reps,) + (1,) * (a.ndim - 1))


class _Perturber:
    """Stacked tangent perturbations of window slots, matching ``retract``."""

    def __init__(self, kind, h):
        self.kind = kind
        self.h = h
        self.dq = {(d, s): lie.quat_exp(s * h * _AXES[d]) for d in range(3) for s in (1, -1)}

    def stack(self, Q, P, dims=range(6)):
        """All +/- perturbations of every (slot, dim) pair, stacked along the batch axis.

        Batch block ``2 i + k`` holds combo ``i`` with sign ``(+1, -1)[k]``.
        """
        combos = [(j, d) for j in range(4) for d in dims]
        n = len(Q)
        S = 2 * len(combos)
        Qs = np.repeat(Q[None], S, axis=0)
        Ps = np.repeat(P[None], S, axis=0)
        for i, (j, d) in enumerate(combos):
            for k, s in enumerate((1, -1)):
                m = 2 * i + k
                if d >= 3:
                    Qs[m, :, j] = lie.quat_mul(Q[:, j], self.dq[(d - 3, s)])
                elif self.kind == "split":
                    Ps[m, :, j, d] += s * self.h
                else:
                    Ps[m, :, j] += rotate(Q[:, j], np.broadcast_to(s * self.h * _AXES[d], (n, 3)))
        return Qs.reshape(S * n, 4, 4), Ps.reshape(S * n, 4, 3), combos

    def difference(self, out, n_combos):
        out = out.reshape(n_combos, 2, -1, out.shape[-1])
        return (out[:, 0] - out[:, 1]) / (2 * self.h)


@dataclass
class Evaluation:
    cost: float
    parts: dict
    residual: np.ndarray
    jacobian: object = None
    valid: np.ndarray = None
    newton_iterations: np.ndarray = None
    skipped: int = 0


def _windows(traj, basis):
    idx = basis.window_indices()
    return traj.quats[idx], traj.positions[idx]


def _ref_world(problem):
    traj = problem.trajectory
    basis = problem._cached("ref_basis", lambda: WindowBasis.at(traj.grid, problem.ref_time))
    ray = problem._cached("ray", lambda: problem.camera.ray(problem.ref_uv))
    Q, P = _windows(traj, basis)
    q, p = traj.window_pose(Q, P, basis)
    return basis, Q, P, q, p, ray


def _newton_solve(problem, config, h_o, rho_o):
    cam = problem.camera
    traj = problem.trajectory
    grid = traj.grid
    r = cam.readout
    # search a widened window: cold-start iterates often put the root outside [t0, t0 + r]
    lo = np.maximum(problem.obs_t0 - r, grid.start)
    hi = np.minimum(problem.obs_t0 + 2 * r, grid.end)

    def pv(t, idx):
        basis = WindowBasis.at(grid, t)
        return traj.window_pose_velocity(*_windows(traj, basis), basis)

    t_init = np.clip(problem.obs_t, lo, hi)
    return solve_projection_times(cam, pv, h_o, rho_o, problem.obs_t0, t_init, lo, hi,
                                  config.newton_tolerance, config.newton_max_iterations)


class _ObsModel:
    """Predicted pixels of all non-reference observations for one projection method."""

    def __init__(self, problem, config):
        self.p = problem
        cam = problem.camera
        traj = problem.trajectory
        self.newton = problem.method == "newton" and cam.readout > 0
        self.scale = cam.Nv / cam.readout if cam.readout > 0 else 0.0
        self.rb, self.Qr, self.Pr, self.qr, self.pr, self.ray = _ref_world(problem)
        lm = problem.obs_lm
        self.h = (rotate(self.qr, self.ray) + self.pr * problem.rho[:, None])[lm]
        self.rho = problem.rho[lm]
        self.valid = np.ones(len(lm), dtype=bool)
        self.newton_iters = None
        if problem.method == "static":
            self.t = problem.obs_t
            self.basis = problem._cached("static_basis", lambda: WindowBasis.at(traj.grid, self.t))
        elif problem.method == "lifting":
            self.t = problem.t_lift
            self.basis = WindowBasis.at(traj.grid, self.t)
        else:
            if cam.readout == 0:
                self.t = problem.obs_t0.copy()
                self.newton_iters = np.zeros(len(lm), dtype=int)
            else:
                t, _, iters, ok = _newton_solve(problem, config, self.h, self.rho)
                self.t = t
                self.valid &= ok
                self.newton_iters = iters
            self.basis = WindowBasis.at(traj.grid, self.t)
        self.Qo, self.Po = _windows(traj, self.basis)
        if self.newton:
            self.base = traj.window_pose_velocity(self.Qo, self.Po, self.basis)
        else:
            self.base = traj.window_pose(self.Qo, self.Po, self.basis)
        self._tiles = {}
        self.uv, ok = self._uv(self.h, self.rho)
        self.valid &= ok

    def _tiled(self, reps):
        if reps not in self._tiles:
            if reps == 1:
                self._tiles[1] = dict(basis=self.basis, base=self.base, t=self.t, t0=self.p.obs_t0,
                                      Qo=self.Qo, Po=self.Po)
            else:
                self._tiles[reps] = dict(
                    basis=self.basis.tile(reps), base=tuple(_tile(a, reps) for a in self.base),
                    t=_tile(self.t, reps), t0=_tile(self.p.obs_t0, reps),
                    Qo=_tile(self.Qo, reps), Po=_tile(self.Po, reps))
        return self._tiles[reps]

    def _uv(self, h, rho, Qo=None, Po=None, reps=1):
        """Predicted pixels for ``reps`` stacked copies of the observation set.

        ``Qo is None`` reuses the unperturbed observation window.
        """
        cam = self.p.camera
        traj = self.p.trajectory
        T = self._tiled(reps)
        basis = T["basis"]
        if self.newton:
            if Qo is None:
                q, p, w, pd = T["base"]
                Qo, Po = T["Qo"], T["Po"]
            else:
                q, p, w, pd = traj.window_pose_velocity(Qo, Po, basis)
            x = camera_point(q, p, h, rho)
            uv, ok = _safe_project(cam, x)
            # one Newton step from the converged time carries dt/dparams
            e = (T["t"] - T["t0"]) * self.scale - uv[:, 1]
            xs = np.where(ok[:, None], x, np.array([0.0, 0.0, 1.0]))
            de = self.scale - transfer_rate(cam, xs, w, rotate_inv(q, pd), rho)[:, 1]
            t2 = T["t"] - e / np.where(np.abs(de) > 1e-12, de, 1e-12)
            b2 = WindowBasis.on_segment(traj.grid, t2, basis.seg)
            q, p = traj.window_pose(Qo, Po, b2)
            uv, ok2 = _safe_project(cam, camera_point(q, p, h, rho))
            return uv, ok & ok2
        if Qo is None:
            q, p = T["base"]
        else:
            q, p = traj.window_pose(Qo, Po, basis)
        return _safe_project(cam, camera_point(q, p, h, rho))

    def pixel_rate(self):
        """d(uv)/dt at the evaluation time (lifting)."""
        cam = self.p.camera
        traj = self.p.trajectory
        q, p, w, pd = traj.window_pose_velocity(self.Qo, self.Po, self.basis)
        x = camera_point(q, p, self.h, self.rho)
        xs = np.where(self.valid[:, None], x, np.array([0.0, 0.0, 1.0]))
        return transfer_rate(cam, xs, w, rotate_inv(q, pd), self.rho)

    def time_residual(self):
        return (self.t - self.p.obs_t0) * self.scale - self.uv[:, 1]

    def jacobian_blocks(self, pert):
        """Yield ``(column indices, d uv)``; the column ``"rho"`` marks inverse depths."""
        p = self.p
        lm = p.obs_lm
        O = len(lm)
        traj = p.trajectory
        # observation window
        Qs, Ps, combos = pert.stack(self.Qo, self.Po)
        S = 2 * len(combos)
        uv, _ = self._uv(_tile(self.h, S), _tile(self.rho, S), Qs, Ps, reps=S)
        D = pert.difference(uv, len(combos))
        for i, (j, d) in enumerate(combos):
            yield 6 * (self.basis.seg + j) + d, D[i]
        # reference window, evaluated per landmark then gathered
        Qs, Ps, combos = pert.stack(self.Qr, self.Pr)
        q, pp = traj.window_pose(Qs, Ps, self.rb.tile(S))
        hh = rotate(q, _tile(self.ray, S)) + pp * _tile(p.rho, S)[:, None]
        hh = hh.reshape(S, -1, 3)[:, lm].reshape(S * O, 3)
        uv, _ = self._uv(hh, _tile(self.rho, S), reps=S)
        D = pert.difference(uv, len(combos))
        for i, (j, d) in enumerate(combos):
            yield 6 * (self.rb.seg[lm] + j) + d, D[i]
        # inverse depth
        step = pert.h
        base = rotate(self.qr, self.ray)
        hh = np.concatenate([(base + self.pr * (p.rho + s)[:, None])[lm] for s in (step, -step)])
        rr = np.concatenate([self.rho + step, self.rho - step])
        uv, _ = self._uv(hh, rr, reps=2)
        yield "rho", pert.difference(uv, 1)[0]


def evaluate(problem: Problem, config: SolverConfig = None, jacobian=False, robust=True) -> Evaluation:
    """Residuals, cost and (optionally) the sparse Jacobian of the whitened residual vector.

    With ``robust`` the reprojection rows are scaled by the square root of
    the Huber IRLS weight so that ``J^T r`` is the cost gradient.
    """
    config = config or SolverConfig()
    cam = problem.camera
    traj = problem.trajectory
    lay = problem.layout(config)
    O = len(problem.obs_lm)
    model = _ObsModel(problem, config)
    valid = model.valid
    e = np.where(valid[:, None], problem.obs_uv - model.uv, 0.0)
    norm = np.linalg.norm(e, axis=1)
    c = config.huber_c
    if robust:
        w = c / np.maximum(norm, c)
        reproj_cost = float(np.sum(huber(norm, c)))
    else:
        w = np.ones(O)
        reproj_cost = float(np.sum(norm * norm))
    sw = np.sqrt(w)
    blocks = [(e * sw[:, None]).ravel()]
    parts = {"reprojection": reproj_cost}
    lifting = problem.method == "lifting"
    if lifting:
        if cam.readout > 0:
            eps = np.where(valid, model.time_residual(), 0.0) / config.time_sigma
        else:
            eps = np.zeros(O)
        blocks.append(eps)
        parts["time"] = float(np.sum(eps * eps))
    gb = problem._cached("gyro_basis", lambda: WindowBasis.at(traj.grid, problem.gyro_t))
    ab = problem._cached("accel_basis", lambda: WindowBasis.at(traj.grid, problem.accel_t))
    Lg = problem._cached("L_g", lambda: _sqrt_info(problem.W_g))
    La = problem._cached("L_a", lambda: _sqrt_info(problem.W_a))
    Qg, Pg = _windows(traj, gb)
    Qa, Pa = _windows(traj, ab)
    rg = (problem.gyro - problem.gyro_bias - traj.window_gyro(Qg, Pg, gb)) @ Lg.T
    ra = (problem.accel - problem.accel_bias - traj.window_accel(Qa, Pa, ab)) @ La.T
    parts["gyro"] = float(np.sum(rg * rg))
    parts["accel"] = float(np.sum(ra * ra))
    blocks += [rg.ravel(), ra.ravel()]
    r = np.concatenate(blocks)
    ev = Evaluation(float(sum(parts.values())), parts, r, valid=valid,
                    newton_iterations=model.newton_iters, skipped=int(O - valid.sum()))
    if not jacobian:
        return ev

    pert = _Perturber(traj.kind, config.fd_step)
    rows, cols, vals = [], [], []
    obs_rows = np.arange(O)
    mask = valid * sw
    row_t = 2 * O

    def add(r_idx, c_idx, v):
        keep = v != 0.0
        rows.append(r_idx[keep])
        cols.append(np.broadcast_to(c_idx, r_idx.shape)[keep])
        vals.append(v[keep])

    for col, duv in model.jacobian_blocks(pert):
        if isinstance(col, str):
            col = lay["rho"] + problem.obs_lm
        # residual is y - uv
        add(2 * obs_rows, col, -duv[:, 0] * mask)
        add(2 * obs_rows + 1, col, -duv[:, 1] * mask)
        if lifting and cam.readout > 0:
            add(row_t + obs_rows, col, -duv[:, 1] * valid / config.time_sigma)
    if lifting and cam.readout > 0:
        col = lay["t"] + obs_rows
        rate = model.pixel_rate()
        add(2 * obs_rows, col, -rate[:, 0] * mask)
        add(2 * obs_rows + 1, col, -rate[:, 1] * mask)
        add(row_t + obs_rows, col, (model.scale - rate[:, 1]) * valid / config.time_sigma)
    start = 2 * O + (O if lifting else 0)
    for (Q, P, basis, L, fn, n_rows, is_gyro) in (
            (Qg, Pg, gb, Lg, traj.window_gyro, len(rg), True),
            (Qa, Pa, ab, La, traj.window_accel, len(ra), False)):
        ridx = start + 3 * np.arange(n_rows)
        # split gyro predictions ignore positions
        dims = range(3, 6) if (is_gyro and traj.kind == "split") else range(6)
        Qs, Ps, combos = pert.stack(Q, P, dims)
        D = pert.difference(fn(Qs, Ps, basis.tile(2 * len(combos))), len(combos))
        for i, (j, d) in enumerate(combos):
            dr = -D[i] @ L.T
            col = 6 * (basis.seg + j) + d
            for k in range(3):
                add(ridx + k, col, dr[:, k])
        if config.optimize_biases:
            bcol = lay["bias"] + (0 if is_gyro else 3)
            for k in range(3):
                for m in range(3):
                    add(ridx + k, np.array(bcol + m), np.full(n_rows, -L[k, m]))
        start += 3 * n_rows
    J = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(r), lay["n"])).tocsr()
    ev.jacobian = J
    return ev


def total_cost(problem: Problem, config: SolverConfig = None) -> float:
    return evaluate(problem, config).cost


# --------------------------------------------------------------------------
# parameter updates
# --------------------------------------------------------------------------

def retract(problem: Problem, delta, config: SolverConfig) -> Problem:
    """Apply a tangent-space step; quaternions stay unit, rho >= 0, lifted times stay in range."""
    lay = problem.layout(config)
    traj = problem.trajectory
    K = problem.n_ctrl
    dc = np.asarray(delta[:6 * K]).reshape(K, 6)
    dq = lie.quat_exp(dc[:, 3:])
    if traj.kind == "split":
        pos = traj.positions + dc[:, :3]
    else:
        tv = np.einsum("nij,nj->ni", lie.so3_left_jacobian(dc[:, 3:]), dc[:, :3])
        pos = traj.positions + rotate(traj.quats, tv)
    quats = lie.quat_normalize(lie.quat_mul(traj.quats, dq))
    new_traj = Trajectory.create(traj.kind, traj.grid, quats, pos, traj.gravity)
    rho = np.maximum(problem.rho + delta[lay["rho"]:lay["rho"] + len(problem.rho)], 0.0)
    t_lift = problem.t_lift
    if problem.method == "lifting":
        lo, hi = problem.lift_bounds()
        t_lift = np.clip(t_lift + delta[lay["t"]:lay["t"] + len(t_lift)], lo, hi)
    gb, ab = problem.gyro_bias, problem.accel_bias
    if config.optimize_biases:
        b = delta[lay["bias"]:lay["bias"] + 6]
        gb, ab = gb + b[:3], ab + b[3:]
    return problem.with_params(new_traj, rho, t_lift, gb, ab)


# --------------------------------------------------------------------------
# Levenberg-Marquardt
# --------------------------------------------------------------------------

@dataclass
class SolveResult:
    problem: Problem
    log: IterationLog
    status: str
    diagnostics: dict

    @property
    def trajectory(self):
        return self.problem.trajectory

    @property
    def inverse_depths(self):
        return self.problem.rho


def _solve_damped(A, g, D, lam, kind):
    if kind == "dense":
        return np.linalg.solve(A.toarray() + lam * np.diag(D), -g)
    M = (A + scipy.sparse.diags(lam * D)).tocsc()
    return scipy.sparse.linalg.spsolve(M, -g)


def _counts(ev):
    return {"skipped": ev.skipped, **{k: float(v) for k, v in ev.parts.items()}}


def solve(problem: Problem, config: SolverConfig = None) -> SolveResult:
    """Levenberg-Marquardt with Marquardt scaling and Nielsen damping updates."""
    config = config or SolverConfig()
    log_ = IterationLog()
    t_start = time.perf_counter()
    ev = evaluate(problem, config, jacobian=True)
    if not np.isfinite(ev.cost):
        raise DivergedError("diverged: non-finite initial cost")
    cost0 = ev.cost
    log_.append(0, ev.cost, cost0, time.perf_counter() - t_start, _counts(ev))
    lam = config.initial_damping
    nu = 2.0
    status = "max_iterations"
    for it in range(1, config.max_iterations + 1):
        t_it = time.perf_counter()
        J = ev.jacobian
        A = (J.T @ J).tocsr()
        g = J.T @ ev.residual
        D = np.maximum(A.diagonal(), 1e-9)
        accepted = False
        while lam < 1e16:
            with np.errstate(all="ignore"):
                try:
                    delta = _solve_damped(A, g, D, lam, config.linear_solver)
                except (np.linalg.LinAlgError, RuntimeError):
                    delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                lam *= nu
                nu *= 2.0
                continue
            cand = retract(problem, delta, config)
            ev_c = evaluate(cand, config)
            pred = -(2.0 * delta @ g + delta @ (A @ delta))
            actual = ev.cost - ev_c.cost
            if np.isfinite(ev_c.cost) and actual > 0:
                gain = actual / pred if pred > 0 else 0.0
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
                nu = 2.0
                accepted = True
                break
            lam *= nu
            nu *= 2.0
        if not accepted:
            log_.append(it, ev.cost, cost0, time.perf_counter() - t_it, _counts(ev))
            status = "stalled"
            break
        rel = actual / ev.cost
        problem = cand
        ev = evaluate(problem, config, jacobian=True)
        log_.append(it, ev.cost, cost0, time.perf_counter() - t_it, _counts(ev))
        if rel < config.function_tolerance:
            status = "converged"
            break
    diag = {"iterations": len(log_) - 1, "skipped_blocks": ev.skipped,
            "final_cost": ev.cost, "initial_cost": cost0}
    if ev.newton_iterations is not None:
        diag["newton_iterations_median"] = float(np.median(ev.newton_iterations))
    log.info("solve finished: %s after %d iterations, relative cost %.3e",
             status, diag["iterations"], ev.cost / cost0 if cost0 else 0.0)
    return SolveResult(problem, log_, status, diag)


# --------------------------------------------------------------------------
# oracle support
# --------------------------------------------------------------------------

def numeric_jacobian(problem: Problem, config: SolverConfig = None, h=1e-6, columns=None):
    """Dense central differences of the unrobustified residuals through ``retract``."""
    config = config or SolverConfig()
    n = problem.layout(config)["n"]
    cols = range(n) if columns is None else columns
    r0 = evaluate(problem, config, robust=False).residual
    J = np.zeros((len(r0), len(cols)))
    for i, k in enumerate(cols):
        d = np.zeros(n)
        d[k] = h
        rp = evaluate(retract(problem, d, config), config, robust=False).residual
        rm = evaluate(retract(problem, -d, config), config, robust=False).residual
        J[:, i] = (rp - rm) / (2 * h)
    return J


def residual_slices(problem: Problem):
    """Row ranges of each residual type in the stacked residual vector."""
    O = len(problem.obs_lm)
    out = {"reprojection": slice(0, 2 * O)}
    start = 2 * O
    if problem.method == "lifting":
        out["time"] = slice(start, start + O)
        start += O
    ng, na = len(problem.gyro_t), len(problem.accel_t)
    out["gyro"] = slice(start, start + 3 * ng)
    out["accel"] = slice(start + 3 * ng, start + 3 * ng + 3 * na)
    return out
