"""Plain-text log formats for poses, corrections, clouds and queries.

All formats are whitespace separated, one record per line; blank lines and
lines starting with ``#`` are ignored.  Floats are written with 17
significant digits so values survive a write/read cycle exactly.  Paths
ending in ``.gz`` are transparently compressed.

Pose log, one pose per line (quaternion w x y z)::

    time tx ty tz qw qx qy qz

Correction log, poses grouped into batches applied at ``batch_time``::

    batch_time time tx ty tz qw qx qy qz

Cloud log, a header per frame followed by ``rows`` lines of ``cols`` pixels;
each pixel line starts with a 0/1 validity mask string, invalid points are
written as ``0 0 0``::

    frame time rows cols k00 k01 k02 k10 k11 k12 k20 k21 k22 max_range min_range
    1101 x y z x y z 0 0 0 x y z

Query file, a body-frame point with an isotropic sigma or the upper triangle
of a full covariance::

    time mx my mz [sigma | sxx sxy sxz syy syz szz]
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .errors import LogFormatError
from .geometry import CameraModel, GaussianPoint, RigidTransform, TimedPose, matrix_to_quaternion
from .kdtree import PointCloud

QUATERNION_TOL = 1e-6


def _fmt(x: float) -> str:
    return "%.17g" % x


def _open(path, mode: str) -> IO[str]:
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="ascii")
    return open(path, mode, encoding="ascii")


def _records(path) -> Iterator[tuple[int, list[str]]]:
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s.split()


def _floats(path, lineno: int, fields: list[str], what: str) -> list[float]:
    try:
        vals = [float(x) for x in fields]
    except ValueError:
        raise LogFormatError(path, lineno, f"non-numeric {what}") from None
    if not np.all(np.isfinite(vals)):
        raise LogFormatError(path, lineno, f"non-finite {what}")
    return vals


@dataclass(frozen=True)
class PoseRecord:
    """A pose as stored on disk: translation and unit quaternion (w, x, y, z)."""

    time: float
    translation: tuple[float, float, float]
    quaternion: tuple[float, float, float, float]

    @classmethod
    def from_pose(cls, p: TimedPose) -> PoseRecord:
        q = matrix_to_quaternion(p.pose.rotation)
        return cls(float(p.time), tuple(float(x) for x in p.pose.translation), tuple(float(x) for x in q))

    def timed_pose(self) -> TimedPose:
        return TimedPose(self.time, RigidTransform.from_quaternion(self.quaternion, self.translation))

    def fields(self) -> list[str]:
        return [_fmt(self.time), *map(_fmt, self.translation), *map(_fmt, self.quaternion)]


def _pose_record(path, lineno: int, fields: list[str]) -> PoseRecord:
    if len(fields) != 8:
        raise LogFormatError(path, lineno, f"expected 8 fields, got {len(fields)}")
    v = _floats(path, lineno, fields, "pose field")
    q = v[4:]
    if abs(np.linalg.norm(q) - 1.0) > QUATERNION_TOL:
        raise LogFormatError(path, lineno, f"quaternion norm {np.linalg.norm(q):.9g} is not 1")
    return PoseRecord(v[0], tuple(v[1:4]), tuple(q))


# -- poses -------------------------------------------------------------------


def write_pose_log(path, records: Iterable[PoseRecord]) -> None:
    with _open(path, "w") as fh:
        fh.write("# time tx ty tz qw qx qy qz\n")
        for r in records:
            fh.write(" ".join(r.fields()) + "\n")


def read_pose_log(path) -> list[PoseRecord]:
    out: list[PoseRecord] = []
    for lineno, fields in _records(path):
        r = _pose_record(path, lineno, fields)
        if out and r.time <= out[-1].time:
            raise LogFormatError(path, lineno, f"time {r.time} is not after {out[-1].time}")
        out.append(r)
    return out


# -- corrections -------------------------------------------------------------


@dataclass(frozen=True)
class CorrectionBatch:
    time: float
    poses: tuple[PoseRecord, ...]


def write_correction_log(path, batches: Iterable[CorrectionBatch]) -> None:
    with _open(path, "w") as fh:
        fh.write("# batch_time time tx ty tz qw qx qy qz\n")
        for b in batches:
            for r in b.poses:
                fh.write(_fmt(b.time) + " " + " ".join(r.fields()) + "\n")


def read_correction_log(path) -> list[CorrectionBatch]:
    batches: list[CorrectionBatch] = []
    current: list[PoseRecord] = []
    batch_time = None
    for lineno, fields in _records(path):
        if len(fields) != 9:
            raise LogFormatError(path, lineno, f"expected 9 fields, got {len(fields)}")
        (bt,) = _floats(path, lineno, fields[:1], "batch time")
        r = _pose_record(path, lineno, fields[1:])
        if batch_time is None or bt != batch_time:
            if batch_time is not None:
                if bt <= batch_time:
                    raise LogFormatError(path, lineno, f"batch time {bt} is not after {batch_time}")
                batches.append(CorrectionBatch(batch_time, tuple(current)))
            batch_time, current = bt, []
        if current and r.time <= current[-1].time:
            raise LogFormatError(path, lineno, f"time {r.time} is not after {current[-1].time}")
        current.append(r)
    if batch_time is not None:
        batches.append(CorrectionBatch(batch_time, tuple(current)))
    return batches


# -- clouds ------------------------------------------------------------------


@dataclass(frozen=True)
class CloudRecord:
    time: float
    camera: CameraModel
    cloud: PointCloud


def format_cloud(rec: CloudRecord) -> str:
    cam = rec.camera
    head = ["frame", _fmt(rec.time), str(cam.rows), str(cam.cols)]
    head += [_fmt(x) for x in cam.intrinsics.reshape(-1)]
    head += [_fmt(cam.max_range), _fmt(cam.min_range)]
    lines = [" ".join(head)]
    pts = rec.cloud.points
    valid = rec.cloud.valid
    for r in range(cam.rows):
        mask = "".join("1" if v else "0" for v in valid[r])
        vals = " ".join(_fmt(x) if x != 0.0 else "0" for x in pts[r].reshape(-1))
        lines.append(mask + " " + vals)
    return "\n".join(lines) + "\n"


def write_cloud_log(path, records: Iterable[CloudRecord]) -> None:
    with _open(path, "w") as fh:
        fh.write("# frame time rows cols K(9, row-major) max_range min_range; then rows of: mask x y z ...\n")
        for rec in records:
            fh.write(format_cloud(rec))


def iter_cloud_log(path) -> Iterator[CloudRecord]:
    """Stream frames from a cloud log, validating as it goes."""
    lines = _records(path)
    last_time = None
    for lineno, fields in lines:
        if fields[0] != "frame" or len(fields) != 15:
            raise LogFormatError(path, lineno, "expected a 'frame' header with 14 values")
        try:
            rows, cols = int(fields[2]), int(fields[3])
        except ValueError:
            raise LogFormatError(path, lineno, "rows and cols must be integers") from None
        if rows <= 0 or cols <= 0:
            raise LogFormatError(path, lineno, "rows and cols must be positive")
        v = _floats(path, lineno, [fields[1], *fields[4:]], "header field")
        t = v[0]
        if last_time is not None and t <= last_time:
            raise LogFormatError(path, lineno, f"frame time {t} is not after {last_time}")
        try:
            cam = CameraModel(np.array(v[1:10]).reshape(3, 3), rows, cols, v[10], v[11])
        except ValueError as e:
            raise LogFormatError(path, lineno, f"invalid camera: {e}") from None
        pts = np.zeros((rows, cols, 3))
        valid = np.zeros((rows, cols), bool)
        for r in range(rows):
            try:
                lineno, row = next(lines)
            except StopIteration:
                raise LogFormatError(path, lineno, f"frame truncated after {r} of {rows} rows") from None
            mask = row[0]
            if len(mask) != cols or set(mask) - {"0", "1"}:
                raise LogFormatError(path, lineno, f"mask must be {cols} characters of 0/1")
            if len(row) != 1 + 3 * cols:
                raise LogFormatError(path, lineno, f"expected {3 * cols} coordinates, got {len(row) - 1}")
            pts[r] = np.array(_floats(path, lineno, row[1:], "coordinate")).reshape(cols, 3)
            valid[r] = np.frombuffer(mask.encode(), np.uint8) == ord("1")
            bad = ~valid[r] & np.any(pts[r] != 0, axis=1)
            if bad.any():
                raise LogFormatError(path, lineno, "invalid pixel must be written as 0 0 0")
            if np.any(pts[r, valid[r], 2] <= 0):
                raise LogFormatError(path, lineno, "valid point with non-positive depth")
        last_time = t
        yield CloudRecord(t, cam, PointCloud(pts, valid))


def read_cloud_log(path) -> list[CloudRecord]:
    return list(iter_cloud_log(path))


# -- queries -----------------------------------------------------------------


@dataclass(frozen=True)
class QueryRecord:
    time: float
    point: GaussianPoint


def read_query_file(path) -> list[QueryRecord]:
    out: list[QueryRecord] = []
    for lineno, fields in _records(path):
        if len(fields) not in (4, 5, 10):
            raise LogFormatError(path, lineno, f"expected 4, 5 or 10 fields, got {len(fields)}")
        v = _floats(path, lineno, fields, "query field")
        if out and v[0] < out[-1].time:
            raise LogFormatError(path, lineno, f"query time {v[0]} goes backwards")
        if len(v) == 4:
            cov = np.zeros((3, 3))
        elif len(v) == 5:
            if v[4] < 0:
                raise LogFormatError(path, lineno, "sigma must be >= 0")
            cov = np.eye(3) * v[4] ** 2
        else:
            xx, xy, xz, yy, yz, zz = v[4:]
            cov = np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
        try:
            out.append(QueryRecord(v[0], GaussianPoint(v[1:4], cov)))
        except ValueError as e:
            raise LogFormatError(path, lineno, str(e)) from None
    return out


def write_query_file(path, queries: Iterable[QueryRecord]) -> None:
    with _open(path, "w") as fh:
        fh.write("# time mx my mz sxx sxy sxz syy syz szz\n")
        for q in queries:
            c = q.point.covariance
            vals = [q.time, *q.point.mean, c[0, 0], c[0, 1], c[0, 2], c[1, 1], c[1, 2], c[2, 2]]
            fh.write(" ".join(_fmt(x) for x in vals) + "\n")
