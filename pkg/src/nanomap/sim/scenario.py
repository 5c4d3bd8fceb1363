"""Scripted flights through synthetic worlds, replayed into a frame chain.

A scenario fixes a world, a truth trajectory, a depth camera, a drift model,
an optional correction schedule and a fan of query points around the vehicle.
``run_scenario`` feeds drifted poses and truth-rendered clouds into a
``FrameChain`` in timestamp order and scores every query against ground truth.

Body frame is x forward, y left, z up.  The sensor looks along body x.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.interpolate import PchipInterpolator

from ..chain import ChainConfig, FrameChain
from ..geometry import (
    CameraModel,
    GaussianPoint,
    RigidTransform,
    TimedPose,
    compose,
    interpolate_sequence,
    rot_y,
    rot_z,
)
from ..kdtree import KdTree, PointCloud
from ..query import nanomap_query, neighbors_in_body_frame
from .drift import DriftConfig, corrupt_trajectory, derive_edge_sigma
from .world import Box, Sphere, World, render_depth

# Columns of the body-to-sensor rotation: sensor right, down, forward in body axes.
FORWARD_MOUNT = RigidTransform(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]))
METRICS_COLUMNS = ("time", "query_id", "search_depth", "frame_index", "error_m", "gamma_m")
BUILTIN = ("forward_corridor", "hard_stop", "bench_reference", "hover")


@dataclass(frozen=True)
class CameraConfig:
    width: int = 160
    height: int = 120
    hfov_deg: float = 90.0
    vfov_deg: float = 60.0
    max_range: float = 10.0
    min_range: float = 0.2
    rate: float = 30.0

    def model(self) -> CameraModel:
        return CameraModel.from_fov(
            self.width, self.height, self.hfov_deg, self.vfov_deg, self.max_range, self.min_range
        )


@dataclass(frozen=True)
class Waypoint:
    time: float
    position: tuple[float, float, float]
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0


@dataclass(frozen=True)
class Trajectory:
    """Position through waypoints by monotone cubic interpolation, attitude linear."""

    waypoints: tuple[Waypoint, ...]
    rate: float = 100.0

    def __post_init__(self):
        times = [w.time for w in self.waypoints]
        if len(times) < 2 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("trajectory needs >= 2 waypoints with increasing times")

    @property
    def duration(self) -> float:
        return self.waypoints[-1].time - self.waypoints[0].time

    def sample(self) -> list[TimedPose]:
        """Truth body-to-world poses at ``rate`` over the whole trajectory."""
        t0 = self.waypoints[0].time
        n = int(math.floor(self.duration * self.rate + 1e-9)) + 1
        times = t0 + np.arange(n) / self.rate
        wt = np.array([w.time for w in self.waypoints])
        pos = PchipInterpolator(wt, np.array([w.position for w in self.waypoints], dtype=float))(times)
        yaw = np.radians(np.interp(times, wt, [w.yaw_deg for w in self.waypoints]))
        pitch = np.radians(np.interp(times, wt, [w.pitch_deg for w in self.waypoints]))
        return [
            TimedPose(float(t), RigidTransform(rot_z(yw) @ rot_y(-pt), p))
            for t, p, yw, pt in zip(times, pos, yaw, pitch)
        ]


@dataclass(frozen=True)
class SamplePlan:
    """Fan of query points around the vehicle.

    ``frame`` is ``body`` (points rotate with the vehicle) or ``level``
    (points follow the heading only, as for a planner sampling level motion).
    """

    distances: tuple[float, ...] = (2.0, 4.0, 6.0)
    yaw_deg: tuple[float, ...] = (-30.0, -15.0, 0.0, 15.0, 30.0)
    pitch_deg: tuple[float, ...] = (0.0,)
    sigma: float = 0.05
    frame: str = "body"

    def __post_init__(self):
        if self.frame not in ("body", "level"):
            raise ValueError(f"unknown sample frame {self.frame!r}")

    def directions(self) -> np.ndarray:
        out = []
        for p in np.radians(self.pitch_deg):
            for y in np.radians(self.yaw_deg):
                out.append([math.cos(p) * math.cos(y), math.cos(p) * math.sin(y), math.sin(p)])
        return np.array(out)

    def points(self, body_pose: RigidTransform) -> np.ndarray:
        """Body-frame sample means for the current attitude, shape (m, 3)."""
        pts = np.concatenate([d * self.directions() for d in self.distances])
        if self.frame == "body":
            return pts
        # Level frame: heading only.  Express the level points in body axes.
        R = body_pose.rotation
        yaw = math.atan2(R[1, 0], R[0, 0])
        level = pts @ rot_z(yaw).T
        return level @ R  # R^T applied to each row


@dataclass(frozen=True)
class Corrections:
    """``sliding``: every ``period`` s, replace the last ``window`` s with truth.

    ``jump``: at ``trigger`` the live estimate jumps by ``offset`` and the
    history is corrected by the same offset.
    """

    mode: str = "none"
    period: float = 1.0
    window: float = 5.0
    trigger: float = 0.0
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("none", "sliding", "jump"):
            raise ValueError(f"unknown correction mode {self.mode!r}")


@dataclass(frozen=True)
class Phase:
    name: str
    start: float
    end: float


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    world: World
    trajectory: Trajectory
    camera: CameraConfig = CameraConfig()
    drift: DriftConfig = DriftConfig()
    corrections: Corrections = Corrections()
    samples: SamplePlan = SamplePlan()
    capacity: int = 150
    edge_sigma: float | str = "derived"
    query_rate: float = 10.0
    k: int = 1
    phases: tuple[Phase, ...] = ()
    bucket: float = 1.0

    def chain_edge_sigma(self) -> np.ndarray:
        if self.edge_sigma == "derived":
            window = self.capacity / self.camera.rate
            return derive_edge_sigma(self.drift, self.capacity, window)
        return np.diag([1.0, 1.0, 0.0]) * float(self.edge_sigma) ** 2


# -- configuration files -------------------------------------------------------


def _world_from(d: dict) -> World:
    boxes = tuple(Box(b["min"], b["max"]) for b in d.get("boxes", []))
    spheres = tuple(Sphere(s["center"], s["radius"]) for s in d.get("spheres", []))
    return World(boxes, spheres)


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


_SCENARIO_KEYS = {
    "name", "world", "trajectory", "camera", "drift", "corrections", "samples",
    "capacity", "edge_sigma", "query_rate", "k", "phases", "bucket",
}


def scenario_from_dict(d: dict) -> ScenarioConfig:
    unknown = sorted(set(d) - _SCENARIO_KEYS)
    if unknown:
        raise ValueError(f"unknown scenario keys: {', '.join(unknown)}")
    traj = d["trajectory"]
    waypoints = tuple(
        Waypoint(float(w["t"]), tuple(w["position"]), float(w.get("yaw", 0.0)), float(w.get("pitch", 0.0)))
        for w in traj["waypoints"]
    )
    samples = dict(d.get("samples", {}))
    for key in ("distances", "yaw_deg", "pitch_deg"):
        if key in samples:
            samples[key] = tuple(float(x) for x in _tuple(samples[key]))
    corr = dict(d.get("corrections", {}))
    if "offset" in corr:
        corr["offset"] = tuple(corr["offset"])
    return ScenarioConfig(
        name=d.get("name", "scenario"),
        world=_world_from(d.get("world", {})),
        trajectory=Trajectory(waypoints, float(traj.get("rate", 100.0))),
        camera=CameraConfig(**d.get("camera", {})),
        drift=DriftConfig(**d.get("drift", {})),
        corrections=Corrections(**corr),
        samples=SamplePlan(**samples),
        capacity=int(d.get("capacity", 150)),
        edge_sigma=d.get("edge_sigma", "derived"),
        query_rate=float(d.get("query_rate", 10.0)),
        k=int(d.get("k", 1)),
        phases=tuple(Phase(p["name"], float(p["start"]), float(p["end"])) for p in d.get("phases", [])),
        bucket=float(d.get("bucket", 1.0)),
    )


def load_scenario(source: str | Path) -> ScenarioConfig:
    """Load a scenario from a YAML file path or a built-in scenario name."""
    name = str(source)
    if name in BUILTIN:
        text = resources.files("nanomap").joinpath("scenarios", f"{name}.yaml").read_text()
    else:
        text = Path(source).read_text()
    return scenario_from_dict(yaml.safe_load(text))


# -- replay ------------------------------------------------------------------


@dataclass(frozen=True)
class RenderedFrame:
    time: float
    sensor_pose: RigidTransform  # true sensor-to-world
    cloud: PointCloud
    tree: KdTree


_FRAME_CACHE: dict = {}


def truth_poses(cfg: ScenarioConfig) -> list[TimedPose]:
    return cfg.trajectory.sample()


def frame_times(cfg: ScenarioConfig, truth: Sequence[TimedPose]) -> np.ndarray:
    t0, t1 = truth[0].time, truth[-1].time
    # The first frame waits for one pose period so it is bracketed by poses.
    start = t0 + 1.0 / cfg.trajectory.rate
    n = int(math.floor((t1 - start) * cfg.camera.rate + 1e-9)) + 1
    return start + np.arange(max(n, 0)) / cfg.camera.rate


def render_frames(cfg: ScenarioConfig, cache: bool = True) -> list[RenderedFrame]:
    """Truth-rendered clouds (with their k-d trees) at the camera rate."""
    key = (cfg.world.key(), cfg.trajectory, cfg.camera)
    if cache and key in _FRAME_CACHE:
        return _FRAME_CACHE[key]
    truth = truth_poses(cfg)
    times = [p.time for p in truth]
    poses = [p.pose for p in truth]
    cam = cfg.camera.model()
    out = []
    for t in frame_times(cfg, truth):
        sensor = compose(interpolate_sequence(times, poses, float(t)), FORWARD_MOUNT)
        cloud = render_depth(cfg.world, sensor, cam)
        out.append(RenderedFrame(float(t), sensor, cloud, KdTree(cloud)))
    if cache:
        _FRAME_CACHE[key] = out
    return out


def correction_schedule(
    cfg: ScenarioConfig, truth: Sequence[TimedPose]
) -> list[tuple[float, list[TimedPose]]]:
    """(time, corrected poses) batches for the configured correction mode."""
    c = cfg.corrections
    if c.mode != "sliding":
        return []
    t0, t1 = truth[0].time, truth[-1].time
    times = np.array([p.time for p in truth])
    out = []
    n = 1
    while t0 + n * c.period <= t1 + 1e-9:
        tc = float(times[np.searchsorted(times, t0 + n * c.period - 1e-9)])
        lo = np.searchsorted(times, tc - c.window - 1e-9)
        hi = np.searchsorted(times, tc + 1e-9)
        out.append((tc, list(truth[lo:hi])))
        n += 1
    return out


def estimated_poses(
    cfg: ScenarioConfig, truth: Sequence[TimedPose], schedule
) -> list[TimedPose]:
    """The pose stream the chain receives: drifted truth, reset at corrections."""
    resets = [tc for tc, _ in schedule]
    est = corrupt_trajectory(truth, cfg.drift, resets) if cfg.drift.sigma_actual > 0 else list(truth)
    c = cfg.corrections
    if c.mode == "jump":
        off = np.asarray(c.offset, dtype=float)
        est = [
            TimedPose(p.time, RigidTransform(p.pose.rotation, p.pose.translation + off))
            if p.time >= c.trigger
            else p
            for p in est
        ]
    return est


@dataclass
class QueryRecord:
    time: float
    query_id: int
    search_depth: int
    frame_index: int  # -1 when out of known space
    error_m: float
    gamma_m: float
    roundtrip_m: float
    phase: str


@dataclass
class ScenarioMetrics:
    records: list[QueryRecord] = field(default_factory=list)
    gamma: float = math.inf
    bucket: float = 1.0

    @property
    def total(self) -> int:
        return len(self.records)

    @property
    def depth_histogram(self) -> dict[int, Counter]:
        """Search-depth counts per time bucket index."""
        hist: dict[int, Counter] = {}
        for r in self.records:
            hist.setdefault(int(math.floor(r.time / self.bucket + 1e-9)), Counter())[r.search_depth] += 1
        return hist

    def depths(self, phase: str | None = None) -> np.ndarray:
        return np.array([r.search_depth for r in self.records if phase is None or r.phase == phase])

    def fraction_at_depth(self, max_depth: int, phase: str | None = None) -> float:
        d = self.depths(phase)
        return float(np.mean(d <= max_depth)) if len(d) else math.nan

    def deep_fraction(self, phase: str | None = None) -> float:
        """Fraction of queries that needed more than the newest frame."""
        d = self.depths(phase)
        return float(np.mean(d > 1)) if len(d) else math.nan

    def mean_error(self) -> float:
        e = np.array([r.error_m for r in self.records])
        return float(np.nanmean(e)) if len(e) else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.records:
            w.writerow(
                [f"{r.time:.6f}", r.query_id, r.search_depth, r.frame_index, f"{r.error_m:.9g}", f"{r.gamma_m:.9g}"]
            )
        return buf.getvalue()

    def histogram_csv(self) -> str:
        hist = self.depth_histogram
        depths = sorted({d for c in hist.values() for d in c})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket_start", *[f"depth_{d}" for d in depths]])
        for b in sorted(hist):
            w.writerow([f"{b * self.bucket:.6f}", *[hist[b].get(d, 0) for d in depths]])
        return buf.getvalue()


def _phase_of(cfg: ScenarioConfig, t: float) -> str:
    for p in cfg.phases:
        if p.start <= t < p.end:
            return p.name
    return ""


def run_scenario(
    cfg: ScenarioConfig,
    seed: int | None = None,
    corrections: bool | None = None,
    frames: list[RenderedFrame] | None = None,
) -> ScenarioMetrics:
    """Replay a scenario and score every query against ground truth.

    ``seed`` overrides the drift seed; ``corrections=False`` disables the
    configured correction schedule (for paired comparisons).

    Per query, ``error_m`` is the distance between the nearest returned
    neighbour as placed in the body frame by the chain's estimates and the
    same surface point placed by the true poses.  ``roundtrip_m`` maps the
    query mean from the answering frame back to the world with the true
    sensor pose and compares it to the world-frame sample.
    """
    if seed is not None:
        cfg = replace(cfg, drift=replace(cfg.drift, seed=seed))
    if corrections is False:
        cfg = replace(cfg, corrections=Corrections())
    truth = truth_poses(cfg)
    frames = frames if frames is not None else render_frames(cfg)
    schedule = correction_schedule(cfg, truth)
    est = estimated_poses(cfg, truth, schedule)
    truth_times = [p.time for p in truth]
    truth_body = [p.pose for p in truth]

    cam = cfg.camera.model()
    chain = FrameChain(
        ChainConfig(
            capacity=cfg.capacity,
            edge_sigma=cfg.chain_edge_sigma(),
            frame_period=1.0 / cfg.camera.rate,
            mount=FORWARD_MOUNT,
            camera=cam,
        )
    )
    if cfg.corrections.mode == "jump":
        off = np.asarray(cfg.corrections.offset, dtype=float)
        jump = [(cfg.corrections.trigger, off)]
    else:
        jump = []

    # Events ordered by (time, kind): pose, correction, cloud, query.
    events: list[tuple[float, int, int]] = []
    events += [(p.time, 0, i) for i, p in enumerate(est)]
    events += [(tc, 1, i) for i, (tc, _) in enumerate(schedule)]
    events += [(t, 1, -1 - i) for i, (t, _) in enumerate(jump)]
    events += [(f.time, 2, i) for i, f in enumerate(frames)]
    t0, t1 = truth[0].time, truth[-1].time
    n_q = int(math.floor((t1 - t0) * cfg.query_rate + 1e-9))
    events += [(t0 + (i + 1) / cfg.query_rate, 3, i) for i in range(n_q)]
    events.sort(key=lambda e: (round(e[0], 9), e[1], e[2]))

    # Running closest distance to any obstacle along the true path.
    clearance = cfg.world.distance(np.array([p.translation for p in truth_body]))
    running_gamma = np.minimum.accumulate(clearance)

    metrics = ScenarioMetrics(gamma=float(running_gamma[-1]), bucket=cfg.bucket)
    world_of_frame = {}
    qid = 0
    for t, kind, i in events:
        if kind == 0:
            chain.add_pose(est[i])
        elif kind == 1:
            if i >= 0:
                chain.apply_pose_updates(schedule[i][1])
            else:
                # History shifted by the same jump as the live estimate.
                off = jump[-1 - i][1]
                times = chain.pose_times
                hist = [
                    TimedPose(tt, RigidTransform(p.rotation, p.translation + off))
                    for tt, p in zip(times, [chain.pose_at(tt) for tt in times])
                    if tt < t
                ]
                chain.apply_pose_updates(hist)
        elif kind == 2:
            f = frames[i]
            chain.add_cloud(f.cloud, f.time, tree=f.tree)
            world_of_frame[f.time] = f.sensor_pose
        elif kind == 3 and chain.body_edge is not None:
            tq = t
            body_true = interpolate_sequence(truth_times, truth_body, tq)
            gi = min(int(np.searchsorted(truth_times, tq + 1e-9)) - 1, len(running_gamma) - 1)
            phase = _phase_of(cfg, tq)
            frames_now = chain.frames()
            means = cfg.samples.points(chain.newest_pose.pose)
            cov = np.eye(3) * cfg.samples.sigma**2
            for m in means:
                res = nanomap_query(chain, GaussianPoint(m, cov), cfg.k)
                fi = res.answer_frame
                sensor_true = world_of_frame[frames_now[fi].timestamp]
                # Round trip of the query mean through the chain.
                world_sample = body_true.apply(m)
                world_back = sensor_true.apply(res.query_in_frame.mean)
                roundtrip = float(np.linalg.norm(world_back - world_sample))
                err = math.nan
                if len(res.neighbors):
                    nb_est = neighbors_in_body_frame(chain, res)[0]
                    nb_true = body_true.inverse().apply(sensor_true.apply(res.neighbors[0]))
                    err = float(np.linalg.norm(nb_est - nb_true))
                metrics.records.append(
                    QueryRecord(
                        float(tq),
                        qid,
                        res.search_depth,
                        -1 if res.out_of_known_space else res.frame_index,
                        err,
                        float(running_gamma[gi]),
                        roundtrip,
                        phase,
                    )
                )
                qid += 1
    return metrics
