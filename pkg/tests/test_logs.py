from __future__ import annotations

import numpy as np
import pytest

from conftest import pose, random_cloud, small_camera
from nanomap.errors import LogFormatError
from nanomap.geometry import GaussianPoint, TimedPose
from nanomap.logs import (
    CloudRecord,
    CorrectionBatch,
    PoseRecord,
    QueryRecord,
    read_cloud_log,
    read_correction_log,
    read_pose_log,
    read_query_file,
    write_cloud_log,
    write_correction_log,
    write_pose_log,
    write_query_file,
)


def pose_records(n=5):
    return [PoseRecord.from_pose(TimedPose(0.1 * i + 1 / 3, pose(i / 7, -i / 3, 1.5, 0.3 * i))) for i in range(n)]


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_pose_log_round_trip_is_exact(tmp_path, suffix):
    recs = pose_records()
    path = tmp_path / f"poses.log{suffix}"
    write_pose_log(path, recs)
    assert read_pose_log(path) == recs


def test_correction_log_groups_batches(tmp_path):
    recs = pose_records(6)
    batches = [CorrectionBatch(1.0, tuple(recs[:3])), CorrectionBatch(2.0, tuple(recs[2:]))]
    path = tmp_path / "c.log"
    write_correction_log(path, batches)
    assert read_correction_log(path) == batches


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_cloud_log_round_trip_is_exact(tmp_path, suffix):
    rng = np.random.default_rng(0)
    cam = small_camera(7, 5)
    recs = [CloudRecord(0.5 * i, cam, random_cloud(rng, cam, invalid=0.3)) for i in range(3)]
    path = tmp_path / f"clouds.log{suffix}"
    write_cloud_log(path, recs)
    back = read_cloud_log(path)
    assert len(back) == 3
    for a, b in zip(recs, back):
        assert a.time == b.time and a.cloud == b.cloud
        np.testing.assert_array_equal(a.camera.intrinsics, b.camera.intrinsics)
        assert (a.camera.rows, a.camera.cols, a.camera.max_range, a.camera.min_range) == (
            b.camera.rows, b.camera.cols, b.camera.max_range, b.camera.min_range)


def test_query_file_forms(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("# comment\n\n0.1 1 2 3\n0.2 1 2 3 0.5\n0.2 1 2 3 1 0.1 0 2 0 3\n")
    q = read_query_file(path)
    np.testing.assert_array_equal(q[0].point.covariance, np.zeros((3, 3)))
    np.testing.assert_array_equal(q[1].point.covariance, np.eye(3) * 0.25)
    np.testing.assert_array_equal(np.diag(q[2].point.covariance), [1, 2, 3])
    assert q[2].point.covariance[0, 1] == 0.1 == q[2].point.covariance[1, 0]
    out = tmp_path / "q2.txt"
    write_query_file(out, q)
    for a, b in zip(q, read_query_file(out)):
        np.testing.assert_array_equal(a.point.mean, b.point.mean)
        np.testing.assert_array_equal(a.point.covariance, b.point.covariance)


def test_empty_query_file_reads_as_empty(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("# nothing\n")
    assert read_query_file(path) == []


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("0 0 0 0 1 0 0 0\n0.5 0 0 0 1 0 0\n", 2, "expected 8 fields"),
        ("0 0 0 0 1 0 0 0\n0 0 0 0 1 0 0 0\n", 2, "not after"),
        ("# h\n0 0 0 0 2 0 0 0\n", 2, "quaternion norm"),
        ("0 x 0 0 1 0 0 0\n", 1, "non-numeric"),
        ("0 nan 0 0 1 0 0 0\n", 1, "non-finite"),
    ],
)
def test_malformed_pose_lines_report_file_and_line(tmp_path, text, line, fragment):
    path = tmp_path / "p.log"
    path.write_text(text)
    with pytest.raises(LogFormatError) as e:
        read_pose_log(path)
    assert e.value.lineno == line
    assert str(e.value).startswith(f"{path}:{line}:")
    assert fragment in str(e.value)


def cloud_text(cam, mask="11", row="0 0 1 0 0 1"):
    head = "frame 0 1 2 " + " ".join(str(x) for x in cam.intrinsics.reshape(-1)) + f" {cam.max_range} {cam.min_range}"
    return head + "\n" + mask + " " + row + "\n"


@pytest.mark.parametrize(
    "mask, row, fragment",
    [
        ("12", "0 0 1 0 0 1", "mask must be"),
        ("1", "0 0 1 0 0 1", "mask must be"),
        ("11", "0 0 1 0 0", "expected 6 coordinates"),
        ("10", "0 0 1 0 0 1", "written as 0 0 0"),
        ("11", "0 0 1 0 0 -1", "non-positive depth"),
    ],
)
def test_malformed_cloud_rows(tmp_path, mask, row, fragment):
    cam = small_camera(2, 1)
    path = tmp_path / "c.log"
    path.write_text(cloud_text(cam, mask, row))
    with pytest.raises(LogFormatError) as e:
        read_cloud_log(path)
    assert e.value.lineno == 2 and fragment in str(e.value)


def test_truncated_cloud_and_bad_header(tmp_path):
    cam = small_camera(2, 1)
    path = tmp_path / "c.log"
    path.write_text(cloud_text(cam).splitlines()[0] + "\n")
    with pytest.raises(LogFormatError, match="truncated"):
        read_cloud_log(path)
    path.write_text("frame 0 1\n")
    with pytest.raises(LogFormatError, match=r":1: expected a 'frame' header"):
        read_cloud_log(path)


def test_bad_query_lines(tmp_path):
    path = tmp_path / "q.txt"
    path.write_text("1 0 0 1\n0.5 0 0 1\n")
    with pytest.raises(LogFormatError, match=r":2: query time"):
        read_query_file(path)
    path.write_text("1 0 0 1 -1\n")
    with pytest.raises(LogFormatError, match="sigma"):
        read_query_file(path)
    path.write_text("1 0 0 1 1 5 0 1 0 1\n")  # not positive semidefinite
    with pytest.raises(LogFormatError, match=":1:"):
        read_query_file(path)
    path.write_text("1 0 0\n")
    with pytest.raises(LogFormatError, match="expected 4, 5 or 10"):
        read_query_file(path)


def test_query_records_keep_gaussian():
    q = QueryRecord(1.0, GaussianPoint([1, 2, 3], np.eye(3)))
    assert q.point.mean.tolist() == [1, 2, 3]
