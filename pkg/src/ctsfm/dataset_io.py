"""Dataset and result files.

Everything is stored as one JSON document with ``format_version: 1``. Python's
float repr is the shortest string that round-trips, so numbers survive a
write/read cycle bit for bit. IMU streams and tracks are stored row-wise.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Schema or version problem in a dataset/result file."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class CameraMeta(_Model):
    fx: float
    fy: float
    cx: float
    cy: float
    Nu: int = Field(gt=0)
    Nv: int = Field(gt=0)
    readout: float = Field(ge=0)
    frame_period: float = Field(gt=0)


class Metadata(_Model):
    camera: CameraMeta
    camera_rate: float = Field(gt=0)
    imu_rate: float = Field(gt=0)
    sigma_image: float = Field(ge=0)
    sigma_gyro: float = Field(ge=0)
    sigma_accel: float = Field(ge=0)
    gyro_bias: list[float] = Field(min_length=3, max_length=3)
    accel_bias: list[float] = Field(min_length=3, max_length=3)
    gravity: list[float] = Field(min_length=3, max_length=3)
    seed: int
    motion: str
    duration: float = Field(gt=0)


class Frame(_Model):
    id: int
    t0: float


class Track(_Model):
    landmark: int
    # rows of (frame id, u, v)
    obs: list[tuple[int, float, float]]

    @model_validator(mode="after")
    def _long_enough(self):
        if len(self.obs) < 2:
            raise ValueError("track needs at least 2 observations")
        return self


class GroundTruth(_Model):
    # rows of (t, qw, qx, qy, qz, px, py, pz) on a uniform grid
    poses: list[tuple[float, float, float, float, float, float, float, float]]
    landmarks: dict[int, tuple[float, float, float]]
    # inverse depth with respect to each track's first observation
    inv_depth: dict[int, float]


class DatasetFile(_Model):
    format_version: Literal[1] = FORMAT_VERSION
    metadata: Metadata
    frames: list[Frame]
    tracks: list[Track]
    # rows of (t, gx, gy, gz, ax, ay, az)
    imu: list[tuple[float, float, float, float, float, float, float]]
    ground_truth: Optional[GroundTruth] = None

    @model_validator(mode="after")
    def _consistent(self):
        t = [f.t0 for f in self.frames]
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("frame times must be strictly increasing")
        ti = [row[0] for row in self.imu]
        if any(b <= a for a, b in zip(ti, ti[1:])):
            raise ValueError("IMU times must be strictly increasing")
        ids = {f.id for f in self.frames}
        cam = self.metadata.camera
        for k, tr in enumerate(self.tracks):
            for fid, u, v in tr.obs:
                if fid not in ids:
                    raise ValueError("tracks.%d: unknown frame id %d" % (k, fid))
                if not (0.0 <= u <= cam.Nu and 0.0 <= v <= cam.Nv):
                    raise ValueError("tracks.%d: pixel (%r, %r) outside the image" % (k, u, v))
        return self

    # convenience views -----------------------------------------------------

    def frame_times(self):
        return np.array([f.t0 for f in self.frames])

    def imu_array(self):
        return np.array(self.imu, dtype=float).reshape(-1, 7)

    def gt_array(self):
        if self.ground_truth is None:
            raise DatasetError("dataset has no ground truth")
        return np.array(self.ground_truth.poses, dtype=float).reshape(-1, 8)


def _format_errors(err: ValidationError):
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append("%s: %s" % (loc, e["msg"]))
    return "; ".join(parts)


def _check_version(data):
    if not isinstance(data, dict):
        raise DatasetError("<root>: expected an object")
    if "format_version" not in data:
        raise DatasetError("format_version: field required")
    if data["format_version"] != FORMAT_VERSION:
        raise DatasetError("format_version: unsupported version %r" % (data["format_version"],))


def validate_dataset(data) -> DatasetFile:
    _check_version(data)
    try:
        return DatasetFile.model_validate(data)
    except ValidationError as err:
        raise DatasetError(_format_errors(err)) from None


def write_dataset(path, dataset: DatasetFile):
    Path(path).write_text(json.dumps(dataset.model_dump(mode="json"), indent=1))


def read_dataset(path) -> DatasetFile:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise DatasetError("not a valid dataset file: %s" % err) from None
    return validate_dataset(data)


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

class TrajectoryRecord(_Model):
    kind: Literal["split", "se3"]
    t0: float
    dt: float
    count: int
    quats: list[tuple[float, float, float, float]]
    positions: list[tuple[float, float, float]]
    gravity: list[float]


class LandmarkRecord(_Model):
    id: int
    ref_frame: int
    ref_u: float
    ref_v: float
    ref_time: float
    inv_depth: float


class IterationRecord(_Model):
    iteration: int
    cost: float
    relative_cost: float
    wall_ms: float


class ResultFile(_Model):
    format_version: Literal[1] = FORMAT_VERSION
    dataset: str
    projection: Literal["static", "newton", "lifting"]
    quality: float
    knot_spacing: float
    status: str
    trajectory: TrajectoryRecord
    landmarks: list[LandmarkRecord]
    log: list[IterationRecord]
    diagnostics: dict[str, float] = {}


def write_result(path, result: ResultFile):
    Path(path).write_text(json.dumps(result.model_dump(mode="json"), indent=1))


def read_result(path) -> ResultFile:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise DatasetError("not a valid result file: %s" % err) from None
    _check_version(data)
    try:
        return ResultFile.model_validate(data)
    except ValidationError as err:
        raise DatasetError(_format_errors(err)) from None


def trajectory_record(traj) -> TrajectoryRecord:
    g = traj.grid
    return TrajectoryRecord(kind=traj.kind, t0=g.t0, dt=g.dt, count=g.count,
                            quats=traj.quats.tolist(), positions=traj.positions.tolist(),
                            gravity=list(map(float, traj.gravity)))


def trajectory_from_record(rec: TrajectoryRecord):
    from .splines import KnotGrid
    from .trajectory import Trajectory
    return Trajectory.create(rec.kind, KnotGrid(rec.t0, rec.dt, rec.count),
                             np.array(rec.quats), np.array(rec.positions), np.array(rec.gravity))
