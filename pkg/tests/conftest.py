from __future__ import annotations

import re

import numpy as np
import pytest

from nanomap.chain import ChainConfig, FrameChain
from nanomap.geometry import CameraModel, RigidTransform, TimedPose, rot_z
from nanomap.kdtree import PointCloud

# criterion id -> (passed, detail); filled by the acceptance tests.
CRITERIA: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def report():
    def _report(key: str, ok: bool, detail: str) -> None:
        CRITERIA[key] = (bool(ok), detail)
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")

    return _report


def small_camera(cols: int = 32, rows: int = 24, max_range: float = 10.0) -> CameraModel:
    return CameraModel.from_fov(cols, rows, 90.0, 60.0, max_range, 0.2)


def wall_cloud(camera: CameraModel, depth: float) -> PointCloud:
    """Fronto-parallel wall at ``depth`` filling every pixel."""
    return PointCloud(camera.pixel_rays() * depth)


def random_cloud(rng, camera: CameraModel, lo: float = 2.0, hi: float = 8.0, invalid: float = 0.1) -> PointCloud:
    depth = rng.uniform(lo, hi, (camera.rows, camera.cols))
    valid = rng.random((camera.rows, camera.cols)) >= invalid
    return PointCloud(camera.pixel_rays() * depth[..., None], valid)


def pose(x=0.0, y=0.0, z=0.0, yaw=0.0) -> RigidTransform:
    return RigidTransform(rot_z(yaw), [x, y, z])


def chain_from(frames, camera, edge_sigma=None, mount=None, body=None, capacity=150) -> FrameChain:
    """Chain from [(time, body pose, cloud)], oldest first; the body pose
    after the last frame defaults to the last frame's pose."""
    cfg = ChainConfig(
        capacity=capacity,
        edge_sigma=np.zeros((3, 3)) if edge_sigma is None else edge_sigma,
        mount=mount or RigidTransform.identity(),
        camera=camera,
    )
    chain = FrameChain(cfg)
    for t, p, cloud in frames:
        chain.add_pose(TimedPose(t, p))
        chain.add_cloud(cloud, t)
    if body is not None:
        chain.add_pose(body)
    return chain


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
