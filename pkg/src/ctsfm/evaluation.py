"""Rigid alignment of position trajectories and the trapezoid area metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METRIC_RATE = 100.0
INLIER_THRESHOLD = 0.25


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class AlignedPair:
    estimate: np.ndarray  # (n, 3), already transformed
    ground_truth: np.ndarray
    R: np.ndarray
    p: np.ndarray


def rigid_fit(src, dst):
    """Rotation and translation minimising ``sum |R src + p - dst|^2`` (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3 or src.shape != dst.shape:
        raise DegenerateAlignmentError("need at least 3 matching samples")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    # collinear or coincident samples leave the rotation undetermined
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300) or sv[0] < 1e-12:
        raise DegenerateAlignmentError("degenerate sample set (collinear or coincident)")
    U, _, Vt = np.linalg.svd(b.T @ a)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    p = mu_d - R @ mu_s
    return R, p


def align(estimate, ground_truth) -> AlignedPair:
    """Align estimate positions onto ground truth (Procrustes rotation, centroid translation)."""
    R, p = rigid_fit(estimate, ground_truth)
    est = np.asarray(estimate, dtype=float) @ R.T + p
    return AlignedPair(est, np.asarray(ground_truth, dtype=float), R, p)


def area_between(f, g):
    """Trapezoid-summed area between two equally sampled polylines."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if len(f) < 2 or f.shape != g.shape:
        raise ValueError("need at least 2 matching samples")
    a, b = f[:-1], f[1:]
    c, d = g[:-1], g[1:]
    h = np.linalg.norm(a - c, axis=1)
    w = np.linalg.norm(a - b, axis=1) + np.linalg.norm(c - d, axis=1)
    return float(np.sum(0.5 * h * w))


def area_error(pair: AlignedPair) -> float:
    return area_between(pair.estimate, pair.ground_truth)


def common_grid(a, b, rate=METRIC_RATE):
    lo, hi = max(a[0], b[0]), min(a[1], b[1])
    if hi <= lo:
        raise ValueError("trajectories do not overlap in time")
    n = int(np.floor((hi - lo) * rate + 1e-9)) + 1
    return lo + np.arange(n) / rate


def trajectory_area_error(traj, gt_times, gt_positions, rate=METRIC_RATE):
    """Aligned area error of a trajectory against sampled ground-truth positions."""
    gt_times = np.asarray(gt_times, dtype=float)
    lo, hi = traj.support
    t = common_grid((lo, hi), (gt_times[0], gt_times[-1]), rate)
    gt = np.stack([np.interp(t, gt_times, gt_positions[:, i]) for i in range(3)], axis=-1)
    est = traj.poses(t)[1]
    return area_error(align(est, gt))


@dataclass
class Summary:
    count: int
    inlier_ratio: float
    median: float
    p40: float
    p60: float


def summarize(errors, threshold=INLIER_THRESHOLD) -> Summary:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    inl = e[e < threshold]
    if inl.size == 0:
        nan = float("nan")
        return Summary(int(e.size), 0.0, nan, nan, nan)
    return Summary(int(e.size), float(inl.size / e.size), float(np.median(inl)),
                   float(np.percentile(inl, 40, method="linear")),
                   float(np.percentile(inl, 60, method="linear")))
