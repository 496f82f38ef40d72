"""Command-line frontend: simulate, reconstruct, evaluate, benchmark and experiment.

Every command writes its outputs plus one ``<output>.manifest.json`` that
records the command line, configuration, seeds, paths, timings and library
version. Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
The ``CTSFM_THREADS`` environment variable sets the number of worker
processes for batch commands (default 1); every sequence runs
single-threaded, so results do not depend on it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, estimator, evaluation, pipeline, simulator
from .dataset_io import (DatasetError, read_dataset, read_result, trajectory_from_record, write_dataset,
                         write_result)

log = logging.getLogger("ctsfm")

THREADS_ENV = "CTSFM_THREADS"
MANIFEST_SUFFIX = ".manifest.json"


class UsageError(Exception):
    pass


def thread_count():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError("%s must be a positive integer, got %r" % (THREADS_ENV, raw)) from None
    if n < 1:
        raise UsageError("%s must be a positive integer, got %r" % (THREADS_ENV, raw))
    return n


def _single_thread_env():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def write_manifest(out, command, argv, config, seeds, inputs, outputs, wall):
    manifest = dict(command=command, argv=list(argv), config=config, seeds=list(seeds),
                    inputs=[str(p) for p in inputs], outputs=[str(p) for p in outputs],
                    timings=dict(wall_s=wall), version=__version__, python=platform.python_version(),
                    numpy=np.__version__)
    path = Path(str(out) + MANIFEST_SUFFIX)
    path.write_text(json.dumps(manifest, indent=1, default=str))
    return path


def write_table(path, rows):
    path = Path(path)
    fields = list(rows[0]) if rows else []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def _sim_config(args):
    kw = dict(seed=args.seed, duration=args.duration)
    for name in ("camera_rate", "imu_rate", "sigma_image", "sigma_imu", "readout", "landmark_count"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    try:
        return simulator.SimConfig(**kw)
    except ValueError as err:
        raise UsageError(str(err)) from None


def _solver_config(args):
    try:
        return estimator.SolverConfig(max_iterations=args.max_iterations, linear_solver=args.linear_solver)
    except ValueError as err:
        raise UsageError(str(err)) from None


def _check_quality(q):
    if not 0.0 < q < 1.0:
        raise UsageError("--quality must lie in (0, 1)")
    return q


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(args, argv):
    cfg = _sim_config(args)
    out = Path(args.out or "%s_%d.json" % (args.motion, args.seed))
    t = time.perf_counter()
    seq = simulator.simulate(args.motion, cfg)
    write_dataset(out, seq.dataset)
    wall = time.perf_counter() - t
    write_manifest(out, "simulate", argv, dict(vars(args), **{"func": None}), [cfg.seed], [], [out], wall)
    print("wrote %s (%d frames, %d tracks)" % (out, len(seq.dataset.frames), len(seq.dataset.tracks)))
    return 0


def cmd_reconstruct(args, argv):
    q = _check_quality(args.quality)
    cfg = _solver_config(args)
    ds = read_dataset(args.dataset)
    out = Path(args.out)
    t = time.perf_counter()
    rec = pipeline.reconstruct(ds, args.trajectory, args.projection, q, cfg)
    wall = time.perf_counter() - t
    write_result(out, pipeline.result_file(args.dataset, rec, q))
    log_path = Path(str(out.with_suffix("")) + ".log.jsonl")
    with log_path.open("w") as fh:
        for r in rec.result.log.records:
            fh.write(json.dumps(dict(iteration=r["iteration"], cost=r["cost"],
                                     relative_cost=r["relative_cost"], wall_ms=r["wall_ms"])) + "\n")
    write_manifest(out, "reconstruct", argv, dict(vars(args), func=None), [ds.metadata.seed],
                   [args.dataset], [out, log_path], wall)
    res = rec.result
    print("%s after %d iterations, relative cost %.3e" % (res.status, len(res.log) - 1,
                                                         res.log.relative_costs[-1]))
    return 0


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError("cannot read %s: %s" % (path, err)) from None


def _evaluate_one(result_path, dataset_path, threshold):
    data = _load_json(result_path)
    if "frames" in data:
        # a dataset evaluated against itself: its ground-truth samples are the estimate
        est_ds = read_dataset(result_path)
        gt = est_ds.gt_array()
        estimate = ("samples", gt[:, 0], gt[:, 5:8])
        dataset_path = dataset_path or result_path
    else:
        res = read_result(result_path)
        estimate = ("trajectory", trajectory_from_record(res.trajectory))
        dataset_path = dataset_path or res.dataset
    ds = read_dataset(dataset_path)
    if ds.ground_truth is None:
        raise UsageError("dataset %s has no ground truth" % dataset_path)
    gt = ds.gt_array()
    if estimate[0] == "trajectory":
        area = pipeline.area_error(estimate[1], ds)
    else:
        t = evaluation.common_grid((estimate[1][0], estimate[1][-1]), (gt[0, 0], gt[-1, 0]))
        est = np.stack([np.interp(t, estimate[1], estimate[2][:, i]) for i in range(3)], axis=-1)
        ref = np.stack([np.interp(t, gt[:, 0], gt[:, 5 + i]) for i in range(3)], axis=-1)
        area = evaluation.area_error(evaluation.align(est, ref))
    return dict(result=str(result_path), dataset=str(dataset_path), area=float(area),
                inlier=bool(area < threshold))


def cmd_evaluate(args, argv):
    src = Path(args.result)
    if not src.exists():
        raise UsageError("no such file or directory: %s" % src)
    if src.is_dir():
        files = sorted(p for p in src.glob("*.json") if not p.name.endswith(MANIFEST_SUFFIX))
        if not files:
            raise UsageError("no result files in %s" % src)
    else:
        files = [src]
    t = time.perf_counter()
    dataset = args.dataset
    if dataset is not None and Path(dataset).is_dir():
        raise UsageError("--dataset must be a file; batch mode reads each result's own dataset path")
    rows = [_evaluate_one(f, dataset, args.threshold) for f in files]
    s = evaluation.summarize([r["area"] for r in rows], args.threshold)
    metrics = dict(threshold=args.threshold, runs=rows, summary=s.__dict__)
    out = Path(args.out or (str(src.with_suffix("")) + ".metrics.json"))
    out.write_text(json.dumps(metrics, indent=1))
    write_manifest(out, "evaluate", argv, dict(vars(args), func=None), [],
                   files + sorted({Path(r["dataset"]) for r in rows}), [out], time.perf_counter() - t)
    print("%d results, inlier ratio %.2f, median inlier area %.4g m^2" % (s.count, s.inlier_ratio, s.median))
    return 0


def _dataset_paths(items):
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(f for f in p.glob("*.json") if not f.name.endswith(MANIFEST_SUFFIX))
        elif p.exists():
            paths.append(p)
        else:
            raise UsageError("no such file or directory: %s" % p)
    if not paths:
        raise UsageError("no datasets given")
    return paths


def _benchmark_dataset(path, combos, q_hat, max_iterations):
    _single_thread_env()
    ds = read_dataset(path)
    sr = pipeline.run_sew(ds, q_hat)
    cfg = estimator.SolverConfig(max_iterations=max_iterations)
    out = []
    for kind, method in combos:
        res = pipeline.reconstruct(ds, kind, method, q_hat, cfg, sr).result
        out.append((kind, method, list(res.log.iteration_times)))
    return out


def cmd_benchmark(args, argv):
    q = _check_quality(args.quality)
    if args.all_combinations:
        combos = pipeline.ALL_COMBINATIONS
    else:
        combos = [(k, m) for k in args.trajectory for m in args.projection]
    paths = _dataset_paths(args.dataset)
    n = thread_count()
    t = time.perf_counter()
    times = {c: [] for c in combos}
    # timing runs are sequential so that concurrent workers do not skew them
    for path in paths:
        for kind, method, its in _benchmark_dataset(path, combos, q, args.iterations):
            times[(kind, method)] += its
    ref = times.get(("se3", "newton"))
    ref_mean = float(np.mean(ref)) if ref else float("nan")
    rows = []
    for (kind, method), its in times.items():
        mean = float(np.mean(its)) if its else float("nan")
        rows.append(dict(trajectory=kind, projection=method, iterations=len(its),
                         mean_iteration_ms=1e3 * mean, ratio=mean / ref_mean if ref else float("nan")))
    out = write_table(args.out, rows)
    write_manifest(out, "benchmark", argv, dict(vars(args), func=None, workers=n), [], paths, [out],
                   time.perf_counter() - t)
    for r in rows:
        print("%-6s %-8s %8.1f ms  %.2f" % (r["trajectory"], r["projection"], r["mean_iteration_ms"], r["ratio"]))
    return 0


def _experiment_job(job):
    _single_thread_env()
    seed, motion, sim_kw, combos, q_hat, max_iterations, data_dir = job
    cfg = simulator.SimConfig(seed=seed, **sim_kw)
    seq = simulator.simulate(motion, cfg)
    path = Path(data_dir) / ("%s_%03d.json" % (motion, seed))
    write_dataset(path, seq.dataset)
    runs, iters = pipeline.run_sequence(seq.dataset, combos, q_hat,
                                        estimator.SolverConfig(max_iterations=max_iterations),
                                        seq.ground_truth.trajectory)
    return str(path), runs, iters


def cmd_experiment(args, argv):
    q = _check_quality(args.quality)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    _sim_config(args)
    combos = [(k, m) for k in args.trajectory for m in args.projection]
    out = Path(args.out)
    data_dir = out / "datasets"
    data_dir.mkdir(parents=True, exist_ok=True)
    sim_kw = {k: v for k, v in dict(duration=args.duration, sigma_image=args.sigma_image,
                                   sigma_imu=args.sigma_imu).items() if v is not None}
    seeds = [args.seed + i for i in range(args.count)]
    jobs = [(s, args.motion, sim_kw, combos, q, args.max_iterations, str(data_dir)) for s in seeds]
    n = thread_count()
    t = time.perf_counter()
    if n == 1:
        results = [_experiment_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_experiment_job, jobs))
    runs = [r for _, rs, _ in results for r in rs]
    iters = [r for _, _, it in results for r in it]
    runs_path = write_table(out / "runs.csv", runs)
    iters_path = write_table(out / "iterations.csv", iters)
    summary = {}
    for kind, method in combos:
        sel = [r for r in runs if r["trajectory"] == kind and r["projection"] == method]
        s = evaluation.summarize([r["area"] for r in sel])
        summary["%s+%s" % (kind, method)] = dict(s.__dict__, median_relative_cost=float(
            np.median([r["relative_cost"] for r in sel])))
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=1))
    write_manifest(out / "experiment", "experiment", argv, dict(vars(args), func=None, workers=n), seeds,
                   [], [runs_path, iters_path, summary_path] + [Path(p) for p, _, _ in results],
                   time.perf_counter() - t)
    for name, s in summary.items():
        print("%-14s inliers %.2f  median area %.4g  median rel. cost %.3e"
              % (name, s["inlier_ratio"], s["median"], s["median_relative_cost"]))
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_sim_overrides(p):
    p.add_argument("--camera-rate", type=float, dest="camera_rate")
    p.add_argument("--imu-rate", type=float, dest="imu_rate")
    p.add_argument("--sigma-image", type=float, dest="sigma_image")
    p.add_argument("--sigma-imu", type=float, dest="sigma_imu")
    p.add_argument("--readout", type=float)
    p.add_argument("--landmarks", type=int, dest="landmark_count")


def _add_solver(p):
    p.add_argument("--quality", type=float, default=0.99, help="SEW quality target q_hat")
    p.add_argument("--max-iterations", type=int, default=50, dest="max_iterations")
    p.add_argument("--linear-solver", choices=["sparse", "dense"], default="sparse", dest="linear_solver")


MOTIONS = [m.value for m in simulator.MotionType]


def build_parser():
    ap = _Parser(prog="ctsfm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--motion", choices=MOTIONS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--out")
    _add_sim_overrides(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="estimate trajectory and structure from a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--trajectory", choices=["split", "se3"], default="split")
    p.add_argument("--projection", choices=list(estimator.PROJECTIONS), default="newton")
    p.add_argument("--out", required=True)
    _add_solver(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="area error of results against ground truth")
    p.add_argument("--result", required=True, help="result file, dataset file or directory of results")
    p.add_argument("--dataset")
    p.add_argument("--threshold", type=float, default=evaluation.INLIER_THRESHOLD)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="mean solver iteration time per method combination")
    p.add_argument("--dataset", nargs="+", required=True, help="dataset files or directories")
    p.add_argument("--all-combinations", action="store_true", dest="all_combinations")
    p.add_argument("--trajectory", nargs="+", choices=["split", "se3"], default=["split", "se3"])
    p.add_argument("--projection", nargs="+", choices=list(estimator.PROJECTIONS), default=["newton"])
    p.add_argument("--iterations", type=int, default=5, help="solver iterations timed per run")
    p.add_argument("--quality", type=float, default=0.99)
    p.add_argument("--out", default="benchmark.csv")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("experiment", help="batch simulate + reconstruct + evaluate")
    p.add_argument("--motion", choices=MOTIONS, default="free")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--sigma-image", type=float, dest="sigma_image")
    p.add_argument("--sigma-imu", type=float, dest="sigma_imu")
    p.add_argument("--trajectory", nargs="+", choices=["split", "se3"], default=["split", "se3"])
    p.add_argument("--projection", nargs="+", choices=list(estimator.PROJECTIONS),
                   default=["static", "newton", "lifting"])
    p.add_argument("--out", required=True, help="output directory")
    _add_solver(p)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command in ("simulate", "experiment") and args.duration < 1.0:
            raise UsageError("--duration must be at least 1 s")
        return args.func(args, argv)
    except UsageError as err:
        print("error: %s" % err, file=sys.stderr)
        return 2
    except DatasetError as err:
        print("error: invalid input: %s" % err, file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print("error: %s" % err, file=sys.stderr)
        return 2
    except (estimator.DivergedError, RuntimeError, ValueError, np.linalg.LinAlgError) as err:
        print("error: %s" % err, file=sys.stderr)
        return 1
