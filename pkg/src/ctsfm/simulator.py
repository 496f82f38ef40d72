"""Synthetic rolling-shutter visual-inertial sequences.

The world uses camera conventions (x right, y down, z forward) with gravity
along +y, so an unrotated camera is level and looks horizontally. Ground
truth is a split spline with 0.02 s knot spacing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize.elementwise import find_root

from . import lie
from .camera import MIN_DEPTH, RsCamera
from .dataset_io import CameraMeta, DatasetFile, Frame, GroundTruth, Metadata, Track
from .splines import KnotGrid
from .trajectory import SplitTrajectory

SIM_GRAVITY = np.array([0.0, 9.8065, 0.0])
GT_KNOT_SPACING = 0.02
GT_SAMPLE_RATE = 100.0
ROOT_TOL = 1e-6  # rows


class MotionType(str, enum.Enum):
    FREE = "free"
    FORWARD = "forward"
    SIDEWAYS = "sideways"


@dataclass
class SimConfig:
    seed: int = 0
    duration: float = 5.0
    camera_rate: float = 29.97
    imu_rate: float = 300.0
    sigma_image: float = 0.5
    sigma_imu: float = 0.01
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    landmark_count: int = 500
    readout: float = 0.03
    Nu: int = 1920
    Nv: int = 1080
    focal: float = 850.0
    # placeholder car-model parameters for Forward / Sideways
    speed_range: tuple = (1.0, 5.0)
    max_curvature: float = 0.5
    zero_velocity_start: bool = True
    # Free motion amplitudes: position std (m), rotation std (rad), smoothing (s)
    free_position_std: float = 0.5
    free_rotation_std: float = 0.25
    smoothing: float = 0.4

    def __post_init__(self):
        if self.camera_rate <= 0 or self.imu_rate <= 0:
            raise ValueError("rates must be positive")
        if self.duration < 1.0:
            raise ValueError("duration must be at least 1 s")
        if self.readout < 0 or self.readout > 1.0 / self.camera_rate:
            raise ValueError("readout time must lie in [0, frame period]")
        if self.landmark_count < 1:
            raise ValueError("need at least one landmark")

    def camera(self) -> RsCamera:
        return RsCamera(self.focal, self.focal, self.Nu / 2.0, self.Nv / 2.0, self.Nu, self.Nv,
                        self.readout, 1.0 / self.camera_rate)


@dataclass
class GroundTruthSequence:
    motion: MotionType
    trajectory: SplitTrajectory
    landmarks: np.ndarray  # (M, 3) world points


@dataclass
class Observations:
    landmark: np.ndarray
    frame: np.ndarray
    uv: np.ndarray  # noisy
    uv_clean: np.ndarray
    time: np.ndarray  # solved capture time
    frame_times: np.ndarray


@dataclass
class SimulatedSequence:
    config: SimConfig
    ground_truth: GroundTruthSequence
    observations: Observations
    imu: np.ndarray  # rows (t, gx, gy, gz, ax, ay, az)
    imu_clean: np.ndarray
    dataset: DatasetFile = field(repr=False)


def _smoothed_noise(rng, n, dims, sigma_knots):
    pad = int(np.ceil(4 * sigma_knots))
    x = rng.standard_normal((n + 2 * pad, dims))
    x = gaussian_filter1d(x, sigma_knots, axis=0)[pad:pad + n]
    return (x - x.mean(axis=0)) / x.std(axis=0)


def _yaw_quat(angle):
    half = 0.5 * np.asarray(angle)
    z = np.zeros_like(half)
    return np.stack([np.cos(half), z, np.sin(half), z], axis=-1)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)


def generate_ground_truth(motion, config: SimConfig) -> GroundTruthSequence:
    motion = MotionType(motion)
    rng = np.random.default_rng([config.seed, 0])
    grid = KnotGrid.covering(0.0, config.duration, GT_KNOT_SPACING)
    times = grid.t0 + GT_KNOT_SPACING * np.arange(grid.count)
    sig = config.smoothing / GT_KNOT_SPACING
    if motion is MotionType.FREE:
        pos = config.free_position_std * _smoothed_noise(rng, grid.count, 3, sig)
        rot = config.free_rotation_std * _smoothed_noise(rng, grid.count, 3, sig)
        quats = lie.quat_exp(rot)
    else:
        quats, pos = _car_control_points(rng, motion, config, times)
    traj = SplitTrajectory(grid, quats, pos, SIM_GRAVITY)
    return GroundTruthSequence(motion, traj, _place_landmarks(rng, traj, config))


def _car_control_points(rng, motion, config, times):
    """Planar car-like path in the x-z plane, camera locked to the tangent."""
    fine = np.arange(times[0], times[-1] + 1e-3, 1e-3)
    n = len(fine)
    sig = config.smoothing * 4 / 1e-3
    lo, hi = config.speed_range
    base = rng.uniform(lo, hi)
    speed = np.clip(base + 0.25 * (hi - lo) * _smoothed_noise(rng, n, 1, sig)[:, 0], lo, hi)
    if config.zero_velocity_start and motion is MotionType.FORWARD:
        speed = speed * _smoothstep(fine / 1.5)
    curv = config.max_curvature * np.tanh(0.5 * _smoothed_noise(rng, n, 1, sig)[:, 0])
    heading0 = rng.uniform(-np.pi, np.pi)
    dt = np.diff(fine)
    yaw_rate = curv * speed
    heading = heading0 + np.concatenate([[0.0], np.cumsum(0.5 * (yaw_rate[1:] + yaw_rate[:-1]) * dt)])
    vel = speed[:, None] * np.stack([np.sin(heading), np.zeros(n), np.cos(heading)], axis=-1)
    pos = np.concatenate([np.zeros((1, 3)), np.cumsum(0.5 * (vel[1:] + vel[:-1]) * dt[:, None], axis=0)])
    pos_k = np.stack([np.interp(times, fine, pos[:, i]) for i in range(3)], axis=-1)
    head_k = np.interp(times, fine, heading)
    if motion is MotionType.SIDEWAYS:
        head_k = head_k + 0.5 * np.pi
    # shift so the camera starts at the origin
    pos_k -= np.array([np.interp(0.0, times, pos_k[:, i]) for i in range(3)])
    return _yaw_quat(head_k), pos_k


def _place_landmarks(rng, traj, config):
    cam = config.camera()
    m = config.landmark_count
    t = rng.uniform(0.0, config.duration, m)
    uv = rng.uniform([0.0, 0.0], [cam.Nu, cam.Nv], (m, 2))
    depth = np.exp(rng.uniform(np.log(2.0), np.log(50.0), m))
    q, p = traj.poses(t)
    from .splines import rotate
    return rotate(q, cam.ray(uv) * depth[:, None]) + p


def frame_times(config: SimConfig):
    period = 1.0 / config.camera_rate
    n = int(np.floor((config.duration - config.readout) / period + 1e-9)) + 1
    return period * np.arange(n)


def sample_imu(gt: GroundTruthSequence, config: SimConfig, noise=True):
    """IMU rows ``(t, gyro, accel)`` at the IMU rate; returns ``(noisy, ideal)``."""
    n = int(np.floor(config.duration * config.imu_rate + 1e-9)) + 1
    t = np.arange(n) / config.imu_rate
    gyro = gt.trajectory.predict_gyro(t)
    acc = gt.trajectory.predict_accel(t)
    ideal = np.column_stack([t, gyro, acc])
    rng = np.random.default_rng([config.seed, 2])
    meas = ideal.copy()
    meas[:, 1:4] += np.asarray(config.gyro_bias)
    meas[:, 4:7] += np.asarray(config.accel_bias)
    if noise:
        meas[:, 1:] += config.sigma_imu * rng.standard_normal((n, 6))
    return meas, ideal


def observe(gt: GroundTruthSequence, config: SimConfig) -> Observations:
    cam = config.camera()
    traj = gt.trajectory
    X = gt.landmarks
    t0s = frame_times(config)
    out = {k: [] for k in ("landmark", "frame", "uv", "clean", "time")}
    prev_row = np.full(len(X), np.nan)
    for n, t0 in enumerate(t0s):
        lm, tt, uv = _observe_frame(cam, traj, X, t0, prev_row)
        rng = np.random.default_rng([config.seed, 1, n])
        noisy = uv + config.sigma_image * rng.standard_normal(uv.shape)
        keep = cam.in_image(noisy)
        prev_row[lm] = (tt - t0)
        out["landmark"].append(lm[keep])
        out["frame"].append(np.full(keep.sum(), n))
        out["uv"].append(noisy[keep])
        out["clean"].append(uv[keep])
        out["time"].append(tt[keep])
    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in out.items()}
    return Observations(cat["landmark"].astype(int), cat["frame"].astype(int),
                        cat["uv"].reshape(-1, 2), cat["clean"].reshape(-1, 2), cat["time"], t0s)


def _camera_points(traj, X, t):
    """Camera-frame points of landmarks ``X`` (n,3) at times ``t`` (n,)."""
    from .splines import rotate_inv
    q, p = traj.poses(t)
    return rotate_inv(q, X - p)


def _observe_frame(cam: RsCamera, traj, X, t0, prev_row):
    r = cam.readout
    if r == 0:
        x = _camera_points(traj, X, np.full(len(X), t0))
        ok = x[:, 2] > MIN_DEPTH
        uv = cam._project(np.where(ok[:, None], x, [0.0, 0.0, 1.0]))
        keep = ok & cam.in_image(uv)
        idx = np.flatnonzero(keep)
        return idx, np.full(len(idx), t0), uv[idx]
    # cheap visibility prefilter at mid-readout
    x = _camera_points(traj, X, np.full(len(X), t0 + 0.5 * r))
    z = x[:, 2]
    uvm = cam._project(np.where((z > 0.05)[:, None], x, [0.0, 0.0, 1.0]))
    mu, mv = 0.2 * cam.Nu, 0.2 * cam.Nv
    cand = np.flatnonzero((z > 0.05) & (uvm[:, 0] > -mu) & (uvm[:, 0] < cam.Nu + mu)
                          & (uvm[:, 1] > -mv) & (uvm[:, 1] < cam.Nv + mv))
    if len(cand) == 0:
        return cand, np.zeros(0), np.zeros((0, 2))
    scale = cam.Nv / r

    def eps(t, k):
        k = k.astype(int)
        xc = _camera_points(traj, X[k], t)
        v = cam.fy * xc[:, 1] / np.where(xc[:, 2] > MIN_DEPTH, xc[:, 2], np.nan) + cam.cy
        return (t - t0) * scale - v

    # sign changes on a coarse grid locate every root bracket
    frac = np.linspace(0.0, 1.0, 5)
    grid_t = t0 + r * frac
    E = np.stack([eps(np.full(len(cand), tg), cand.astype(float)) for tg in grid_t], axis=1)
    change = (np.sign(E[:, :-1]) != np.sign(E[:, 1:])) & np.isfinite(E[:, :-1]) & np.isfinite(E[:, 1:])
    change |= (E[:, :-1] == 0)
    has = change.any(axis=1)
    # earliest bracket, or the one nearest the previous frame's solution
    first = np.argmax(change, axis=1)
    mids = 0.5 * (frac[:-1] + frac[1:]) * r
    prev = prev_row[cand]
    dist = np.where(change, np.abs(mids[None, :] - prev[:, None]), np.inf)
    nearest = np.argmin(dist, axis=1)
    seg = np.where(np.isfinite(prev), nearest, first)
    sel = np.flatnonzero(has)
    if len(sel) == 0:
        return sel, np.zeros(0), np.zeros((0, 2))
    s = seg[sel]
    a = grid_t[s]
    b = grid_t[s + 1]
    res = find_root(eps, (a, b), args=(cand[sel].astype(float),),
                    tolerances=dict(xatol=1e-15, xrtol=4 * np.finfo(float).eps, fatol=1e-9))
    t = res.x
    idx = cand[sel]
    xc = _camera_points(traj, X[idx], t)
    ok = xc[:, 2] > MIN_DEPTH
    uv = cam._project(np.where(ok[:, None], xc, [0.0, 0.0, 1.0]))
    e = (t - t0) * scale - uv[:, 1]
    keep = ok & (np.abs(e) <= ROOT_TOL) & cam.in_image(uv)
    return idx[keep], t[keep], uv[keep]


def simulate(motion, config: SimConfig, imu_noise=True) -> SimulatedSequence:
    motion = MotionType(motion)
    gt = generate_ground_truth(motion, config)
    obs = observe(gt, config)
    imu, ideal = sample_imu(gt, config, noise=imu_noise)
    ds = to_dataset(motion, config, gt, obs, imu)
    return SimulatedSequence(config, gt, obs, imu, ideal, ds)


def to_dataset(motion, config, gt, obs, imu) -> DatasetFile:
    cam = config.camera()
    meta = Metadata(
        camera=CameraMeta(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, Nu=cam.Nu, Nv=cam.Nv,
                          readout=cam.readout, frame_period=cam.frame_period),
        camera_rate=config.camera_rate, imu_rate=config.imu_rate,
        sigma_image=config.sigma_image, sigma_gyro=config.sigma_imu, sigma_accel=config.sigma_imu,
        gyro_bias=list(map(float, config.gyro_bias)), accel_bias=list(map(float, config.accel_bias)),
        gravity=SIM_GRAVITY.tolist(), seed=config.seed, motion=MotionType(motion).value,
        duration=config.duration)
    frames = [Frame(id=int(i), t0=float(t)) for i, t in enumerate(obs.frame_times)]
    order = np.lexsort((obs.frame, obs.landmark))
    tracks = []
    gt_lm = {}
    gt_rho = {}
    lms, starts = np.unique(obs.landmark[order], return_index=True)
    bounds = list(starts[1:]) + [len(order)]
    for lm, s, e in zip(lms, starts, bounds):
        rows = order[s:e]
        if len(rows) < 2:
            continue
        tracks.append(Track(landmark=int(lm), obs=[(int(obs.frame[i]), float(obs.uv[i, 0]), float(obs.uv[i, 1]))
                                                   for i in rows]))
        gt_lm[int(lm)] = tuple(float(c) for c in gt.landmarks[lm])
        x = _camera_points(gt.trajectory, gt.landmarks[lm][None], obs.time[rows[:1]])
        gt_rho[int(lm)] = float(1.0 / x[0, 2])
    n = int(np.floor(config.duration * GT_SAMPLE_RATE + 1e-9)) + 1
    ts = np.arange(n) / GT_SAMPLE_RATE
    q, p = gt.trajectory.poses(ts)
    poses = np.column_stack([ts, q, p]).tolist()
    return DatasetFile(metadata=meta, frames=frames, tracks=tracks,
                       imu=[tuple(r) for r in imu.tolist()],
                       ground_truth=GroundTruth(poses=[tuple(r) for r in poses],
                                                landmarks=gt_lm, inv_depth=gt_rho))
