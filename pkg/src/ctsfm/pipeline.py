"""End-to-end helpers shared by the CLI, the experiment driver and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import estimator, evaluation, sew
from .dataset_io import (DatasetFile, IterationRecord, LandmarkRecord, ResultFile, trajectory_record)


def run_sew(dataset: DatasetFile, q_hat=sew.DEFAULT_QUALITY) -> sew.SewResult:
    imu = dataset.imu_array()
    meta = dataset.metadata
    return sew.compute_weights(imu[:, 1:4], imu[:, 4:7], meta.sigma_gyro, meta.sigma_accel,
                               q_hat, meta.imu_rate)


@dataclass
class Reconstruction:
    sew: sew.SewResult
    initial: estimator.Problem
    result: estimator.SolveResult


def reconstruct(dataset: DatasetFile, kind="split", projection="newton", q_hat=sew.DEFAULT_QUALITY,
                config: estimator.SolverConfig = None, sew_result=None) -> Reconstruction:
    sr = sew_result or run_sew(dataset, q_hat)
    problem = estimator.build_problem(dataset, kind, projection, sr)
    res = estimator.solve(problem, config)
    return Reconstruction(sr, problem, res)


def area_error(traj, dataset: DatasetFile) -> float:
    gt = dataset.gt_array()
    return evaluation.trajectory_area_error(traj, gt[:, 0], gt[:, 5:8])


def inverse_depth_errors(problem: estimator.Problem, dataset: DatasetFile, gt_traj):
    """Relative inverse-depth errors against ground truth at each reference time.

    ``gt_traj`` is the ground-truth trajectory; returns ``(true rho, relative error)``.
    """
    from .splines import rotate_inv
    pts = dataset.ground_truth.landmarks
    X = np.array([pts[int(i)] for i in problem.lm_ids])
    q, p = gt_traj.poses(problem.ref_time)
    z = rotate_inv(q, X - p)[:, 2]
    true = 1.0 / z
    return true, np.abs(problem.rho - true) / np.abs(true)


def result_file(dataset_name, recon: Reconstruction, q_hat) -> ResultFile:
    pr = recon.result.problem
    lms = [LandmarkRecord(id=int(i), ref_frame=int(f), ref_u=float(uv[0]), ref_v=float(uv[1]),
                          ref_time=float(t), inv_depth=float(r))
           for i, f, uv, t, r in zip(pr.lm_ids, pr.ref_frame, pr.ref_uv, pr.ref_time, pr.rho)]
    logs = [IterationRecord(iteration=r["iteration"], cost=r["cost"], relative_cost=r["relative_cost"],
                            wall_ms=r["wall_ms"]) for r in recon.result.log.records]
    diag = {k: float(v) for k, v in recon.result.diagnostics.items()}
    return ResultFile(dataset=str(dataset_name), projection=pr.method, quality=float(q_hat),
                      knot_spacing=float(recon.sew.dt), status=recon.result.status,
                      trajectory=trajectory_record(pr.trajectory), landmarks=lms, log=logs,
                      diagnostics=diag)


ALL_COMBINATIONS = [(k, m) for k in ("split", "se3") for m in ("static", "newton", "lifting")]


def run_sequence(dataset: DatasetFile, combos, q_hat=sew.DEFAULT_QUALITY, config=None, gt_traj=None):
    """Reconstruct one dataset with every ``(trajectory, projection)`` combination.

    All combinations share the SEW result and the observation selection.
    Returns tidy ``(run rows, iteration rows)``.
    """
    sr = run_sew(dataset, q_hat)
    runs, iters = [], []
    for kind, method in combos:
        rec = reconstruct(dataset, kind, method, q_hat, config, sr)
        res = rec.result
        area = area_error(res.trajectory, dataset) if dataset.ground_truth is not None else float("nan")
        times = res.log.iteration_times
        row = dict(seed=dataset.metadata.seed, motion=dataset.metadata.motion, trajectory=kind,
                   projection=method, status=res.status, iterations=len(res.log) - 1,
                   relative_cost=float(res.log.relative_costs[-1]), area=float(area),
                   mean_iteration_ms=float(1e3 * times.mean()) if len(times) else float("nan"),
                   knot_spacing=float(sr.dt), skipped=int(res.diagnostics["skipped_blocks"]))
        if gt_traj is not None:
            true, err = inverse_depth_errors(res.problem, dataset, gt_traj)
            row["inv_depth_median_error"] = float(np.median(err[true > 0.05])) if np.any(true > 0.05) else float("nan")
        runs.append(row)
        for r in res.log.records:
            iters.append(dict(seed=row["seed"], trajectory=kind, projection=method, iteration=r["iteration"],
                              cost=r["cost"], relative_cost=r["relative_cost"], wall_ms=r["wall_ms"]))
    return runs, iters
