from __future__ import annotations

import numpy as np
import pytest

from conftest import small_camera
from nanomap.geometry import RigidTransform, TimedPose
from nanomap.sim.drift import DriftConfig, corrupt_trajectory, derive_edge_sigma, horizontal_drift, window_drift
from nanomap.sim.scenario import (
    BUILTIN,
    FORWARD_MOUNT,
    Corrections,
    load_scenario,
    run_scenario,
    scenario_from_dict,
)
from nanomap.sim.world import Box, Sphere, World, render_depth

CAM = small_camera(41, 31, 20.0)


def test_empty_world_has_no_returns():
    cloud = render_depth(World(), RigidTransform.identity(), CAM)
    assert not cloud.valid.any()


def test_wall_renders_constant_depth():
    world = World(boxes=(Box([-50, -50, 10], [50, 50, 11]),))
    cloud = render_depth(world, RigidTransform.identity(), CAM)
    assert cloud.valid.all()
    np.testing.assert_allclose(cloud.points[..., 2], 10.0, atol=1e-9)


def test_sphere_on_axis_gives_near_surface_depth():
    world = World(spheres=(Sphere([0, 0, 5], 1.0),))
    cloud = render_depth(world, RigidTransform.identity(), CAM)
    np.testing.assert_allclose(cloud.points[CAM.rows // 2, CAM.cols // 2], [0, 0, 4.0], atol=1e-9)
    # Pixels well off the sphere see nothing.
    assert not cloud.valid[0, 0]


def test_returns_lie_on_obstacle_surfaces():
    world = load_scenario("forward_corridor").world
    sensor = RigidTransform(np.eye(3), [0, 0, 1.5]) @ FORWARD_MOUNT
    cloud = render_depth(world, sensor, CAM)
    pts = sensor.apply(cloud.points[cloud.valid])
    assert len(pts) > 0
    assert np.max(world.distance(pts)) < 1e-6
    z = cloud.points[cloud.valid][:, 2]
    assert np.all((z >= CAM.min_range) & (z <= CAM.max_range))


def straight_line(n=300, rate=100.0, v=2.0):
    return [TimedPose(i / rate, RigidTransform(np.eye(3), [v * i / rate, 0.0, 1.0])) for i in range(n)]


def test_zero_noise_returns_truth():
    truth = straight_line()
    out = corrupt_trajectory(truth, DriftConfig(0.0))
    for a, b in zip(truth, out):
        assert a.pose.almost_equal(b.pose, 0.0)


def test_drift_is_horizontal_and_reproducible():
    truth = straight_line()
    a = corrupt_trajectory(truth, DriftConfig(0.2, seed=3))
    b = corrupt_trajectory(truth, DriftConfig(0.2, seed=3))
    c = corrupt_trajectory(truth, DriftConfig(0.2, seed=4))
    pa = np.array([p.pose.translation for p in a])
    pb = np.array([p.pose.translation for p in b])
    pc = np.array([p.pose.translation for p in c])
    np.testing.assert_array_equal(pa, pb)
    assert not np.allclose(pa, pc)
    np.testing.assert_array_equal(pa[:, 2], 1.0)
    for x, y in zip(truth, a):
        np.testing.assert_array_equal(x.pose.rotation, y.pose.rotation)


def test_reset_zeroes_error_at_reset_index():
    pos = np.zeros((200, 3))
    d = horizontal_drift(pos, 0.01, DriftConfig(0.3, seed=1), reset_indices=[100])
    np.testing.assert_array_equal(d[100], 0.0)
    assert np.any(d[101:] != 0)


def test_too_short_trajectory_raises():
    with pytest.raises(ValueError):
        corrupt_trajectory(straight_line(2), DriftConfig(0.1))


def test_zero_sigma_gives_zero_edge_covariance():
    np.testing.assert_array_equal(derive_edge_sigma(DriftConfig(0.0)), np.zeros((3, 3)))


def test_window_drift_variance_grows_with_cube_of_window():
    cfg = DriftConfig(0.1, rate=100.0)
    v1 = window_drift(cfg, 1.0, 2000).var(axis=0).mean()
    v2 = window_drift(cfg, 2.0, 2000).var(axis=0).mean()
    assert v2 / v1 == pytest.approx(8.0, rel=0.15)


def test_edge_covariance_matches_integrated_white_noise():
    # Stationary vehicle: the error is eta*xi with variance s^2 (1 + s^2),
    # integrated twice over T gives s^2 (1 + s^2) dt T^3 / 3 per axis.
    s, rate, T, n = 0.2, 100.0, 5.0, 150
    cov = derive_edge_sigma(DriftConfig(s, rate), n, T, 2000)
    expected = s**2 * (1 + s**2) / rate * T**3 / 3 / n
    assert cov[0, 0] == pytest.approx(expected, rel=0.15)
    assert cov[1, 1] == pytest.approx(expected, rel=0.15)
    assert cov[2, 2] == 0.0


@pytest.mark.parametrize("name", BUILTIN)
def test_builtin_scenarios_load(name):
    cfg = load_scenario(name)
    assert cfg.name == name
    assert cfg.trajectory.duration > 0


def test_unknown_keys_and_modes_rejected():
    with pytest.raises(ValueError):
        Corrections("sometimes")
    with pytest.raises((ValueError, OSError)):
        load_scenario("no_such_scenario")
    base = {
        "name": "x",
        "world": {},
        "trajectory": {"rate": 100, "waypoints": [{"t": 0, "position": [0, 0, 1]}, {"t": 1, "position": [1, 0, 1]}]},
    }
    scenario_from_dict(base)
    with pytest.raises(ValueError):
        scenario_from_dict({**base, "bogus": 1})


@pytest.fixture(scope="module")
def hover_metrics():
    return run_scenario(load_scenario("hover"))


def test_hover_queries_are_answered_by_newest_frame(hover_metrics):
    assert hover_metrics.total > 0
    assert np.all(hover_metrics.depths() == 1)


def test_histogram_totals_match_query_count(hover_metrics):
    hist = hover_metrics.depth_histogram
    assert sum(sum(c.values()) for c in hist.values()) == hover_metrics.total
    lines = hover_metrics.histogram_csv().strip().splitlines()
    assert lines[0] == "bucket_start,depth_1"
    assert sum(int(l.split(",")[1]) for l in lines[1:]) == hover_metrics.total
    csv_lines = hover_metrics.to_csv().strip().splitlines()
    assert csv_lines[0] == "time,query_id,search_depth,frame_index,error_m,gamma_m"
    assert len(csv_lines) == hover_metrics.total + 1


def test_hover_without_drift_has_no_error(hover_metrics):
    err = np.array([r.error_m for r in hover_metrics.records])
    assert np.nanmax(err) < 1e-9


def test_different_seeds_decorrelate():
    pos = np.zeros((300, 3))
    corr = []
    for s in range(100):
        a = horizontal_drift(pos, 0.01, DriftConfig(0.2, seed=2 * s))[:, 0]
        b = horizontal_drift(pos, 0.01, DriftConfig(0.2, seed=2 * s + 1))[:, 0]
        corr.append(np.corrcoef(np.diff(a, 2), np.diff(b, 2))[0, 1])
    assert abs(np.mean(corr)) < 0.1
