"""Timing harness: query cost, pose-update cost and search-depth histograms.

Every measurement runs 3 discarded warm-up trials, then ``trials`` timed
trials on a monotonic nanosecond clock.  Rows are one per timed trial; the
summary reduces them to mean and standard error of the mean.
"""

from __future__ import annotations

import csv
import gc
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .baseline import VoxelMap
from .chain import ChainConfig, FrameChain
from .geometry import GaussianPoint, RigidTransform, TimedPose, interpolate_sequence
from .kdtree import KdTree
from .query import nanomap_query
from .sim.scenario import (
    FORWARD_MOUNT,
    RenderedFrame,
    ScenarioConfig,
    ScenarioMetrics,
    load_scenario,
    render_frames,
    run_scenario,
    truth_poses,
)

WARMUP = 3
BENCH_COLUMNS = ("experiment", "method", "param", "trial", "wall_time_ns", "aux")
SUMMARY_COLUMNS = ("experiment", "method", "param", "trials", "mean_ns", "sem_ns", "min_ns", "aux")


@dataclass(frozen=True)
class BenchRow:
    experiment: str
    method: str
    param: int
    trial: int
    wall_time_ns: int
    aux: float = math.nan


@dataclass(frozen=True)
class Summary:
    experiment: str
    method: str
    param: int
    trials: int
    mean_ns: float
    sem_ns: float
    min_ns: float  # least sensitive to scheduler noise; used for shape fits
    aux: float


def time_trials(
    run: Callable[[object], object],
    trials: int,
    setup: Callable[[], object] | None = None,
    warmup: int = WARMUP,
) -> list[int]:
    """Wall time in ns of ``run(setup())`` per trial; setup is not timed.

    The garbage collector is paused inside the timed region, as ``timeit``
    does.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    out = []
    enabled = gc.isenabled()
    try:
        for i in range(warmup + trials):
            state = setup() if setup is not None else None
            gc.disable()
            t0 = time.perf_counter_ns()
            run(state)
            dt = time.perf_counter_ns() - t0
            if enabled:
                gc.enable()
            if i >= warmup:
                out.append(dt)
    finally:
        if enabled:
            gc.enable()
    return out


def summarize(rows: Iterable[BenchRow]) -> list[Summary]:
    groups: dict[tuple, list[BenchRow]] = {}
    for r in rows:
        groups.setdefault((r.experiment, r.method, r.param), []).append(r)
    out = []
    for (exp, method, param), rs in groups.items():
        t = np.array([r.wall_time_ns for r in rs], dtype=np.float64)
        sem = float(t.std(ddof=1) / math.sqrt(len(t))) if len(t) > 1 else math.nan
        out.append(Summary(exp, method, param, len(t), float(t.mean()), sem, float(t.min()), rs[0].aux))
    return out


def lookup(summaries: Sequence[Summary], experiment: str, method: str, param: int) -> Summary:
    for s in summaries:
        if (s.experiment, s.method, s.param) == (experiment, method, param):
            return s
    raise KeyError((experiment, method, param))


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line: (slope, intercept, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def _num(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else "%.9g" % x


def rows_csv(rows: Iterable[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([r.experiment, r.method, r.param, r.trial, r.wall_time_ns, _num(r.aux)])
    return buf.getvalue()


def summary_csv(summaries: Iterable[Summary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        w.writerow(
            [s.experiment, s.method, s.param, s.trials, "%.1f" % s.mean_ns, _num(s.sem_ns), "%d" % s.min_ns, _num(s.aux)]
        )
    return buf.getvalue()


# -- reference scene -------------------------------------------------------------


class BenchScene:
    """Truth poses and rendered frames of a scenario, ready to preload.

    Frames and poses are noise free: timing does not depend on drift.
    """

    def __init__(self, config: ScenarioConfig, frames: list[RenderedFrame] | None = None):
        self.config = config
        self.frames = frames if frames is not None else render_frames(config)
        self.truth = truth_poses(config)
        self._times = [p.time for p in self.truth]
        self._poses = [p.pose for p in self.truth]

    @classmethod
    def load(cls, source: str = "bench_reference") -> BenchScene:
        return cls(load_scenario(source))

    @property
    def camera(self):
        return self.config.camera.model()

    def _check(self, history: int, upto: int) -> None:
        if not 1 <= history <= upto < len(self.frames):
            raise ValueError(
                f"need 1 <= history <= upto < {len(self.frames)} frames, got {history}, {upto}"
            )

    def body_index(self, upto: int) -> int:
        """Index of the first truth pose at or after frame ``upto`` (brackets it)."""
        t = self.frames[upto].time
        return int(np.searchsorted(self._times, t - 1e-12))

    def body_pose(self, upto: int) -> RigidTransform:
        return self._poses[self.body_index(upto)]

    def chain(self, history: int, upto: int) -> FrameChain:
        """Chain holding frames ``upto - history .. upto - 1`` and poses up to frame ``upto``."""
        self._check(history, upto)
        cfg = self.config
        chain = FrameChain(
            ChainConfig(
                capacity=history,
                edge_sigma=cfg.chain_edge_sigma(),
                frame_period=1.0 / cfg.camera.rate,
                mount=FORWARD_MOUNT,
                camera=self.camera,
            )
        )
        first = self.frames[upto - history]
        lo = max(0, int(np.searchsorted(self._times, first.time)) - 1)
        hi = self.body_index(upto)
        fi = upto - history
        for p in self.truth[lo : hi + 1]:
            chain.add_pose(p)
            while fi < upto and self.frames[fi].time <= p.time:
                f = self.frames[fi]
                chain.add_cloud(f.cloud, f.time, tree=f.tree)
                fi += 1
        return chain

    def baseline(self, history: int, upto: int, voxel_size: float = 0.25) -> VoxelMap:
        self._check(history, upto)
        vm = VoxelMap(voxel_size)
        for f in self.frames[upto - history : upto]:
            vm.fuse(f.cloud, f.sensor_pose, f.time)
        return vm


def best_case_points(n: int, seed: int = 0) -> np.ndarray:
    """Body-frame points well inside the forward view (1-4 m, +-25 deg, +-15 deg)."""
    rng = np.random.default_rng(seed)
    r = rng.uniform(1.0, 4.0, n)
    yaw = np.radians(rng.uniform(-25.0, 25.0, n))
    pitch = np.radians(rng.uniform(-15.0, 15.0, n))
    return np.column_stack([r * np.cos(pitch) * np.cos(yaw), r * np.cos(pitch) * np.sin(yaw), r * np.sin(pitch)])


def worst_case_points(n: int, seed: int = 0) -> np.ndarray:
    """Body-frame points 30-40 m ahead, behind the hall's end wall in every view."""
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(30.0, 40.0, n), rng.uniform(-2.0, 2.0, n), rng.uniform(-0.5, 0.5, n)])


def _gaussians(points: np.ndarray, sigma: float) -> list[GaussianPoint]:
    cov = np.eye(3) * sigma**2
    return [GaussianPoint(p, cov) for p in points]


def _run_queries(chain: FrameChain, queries: Sequence[GaussianPoint], workers: int) -> None:
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda q: nanomap_query(chain, q), queries))
    else:
        for q in queries:
            nanomap_query(chain, q)


def bench_queries(
    scene: BenchScene,
    n_queries: Sequence[int] = (0, 10, 100, 500, 1000, 2500),
    trials: int = 5,
    history: int = 150,
    sigma: float = 0.05,
    seed: int = 0,
    workers: int = 1,
) -> list[BenchRow]:
    """Insert one new cloud, then answer ``n`` nearest-obstacle queries.

    Methods: ``nanomap_best`` (queries inside the newest view),
    ``nanomap_worst`` (queries no stored view contains, so the whole history
    is searched), ``baseline`` and ``baseline_far`` (fuse the cloud, then the
    same two query sets against the fused grid).  ``aux`` holds the mean
    search depth for NanoMap rows.  The new cloud's k-d tree build is timed.
    """
    upto = history
    new = scene.frames[upto]
    body = scene.body_pose(upto)
    base_map = None
    rows: list[BenchRow] = []
    for n in n_queries:
        sets = {"best": best_case_points(n, seed), "worst": worst_case_points(n, seed + 1)}
        for case, pts in sets.items():
            queries = _gaussians(pts, sigma)

            def run_chain(chain, queries=queries):
                chain.add_cloud(new.cloud, new.time, tree=KdTree(new.cloud))
                _run_queries(chain, queries, workers)

            def setup_chain():
                return scene.chain(history, upto)

            times = time_trials(run_chain, trials, setup_chain)
            chain = setup_chain()
            chain.add_cloud(new.cloud, new.time, tree=new.tree)
            depth = float(np.mean([nanomap_query(chain, q).search_depth for q in queries])) if n else math.nan
            rows += [BenchRow("queries", f"nanomap_{case}", n, i, t, depth) for i, t in enumerate(times)]

            world = body.apply(pts) if n else np.empty((0, 3))
            if base_map is None:
                base_map = scene.baseline(history, upto)

            def run_map(vm, world=world):
                vm.fuse(new.cloud, new.sensor_pose, new.time)
                for p in world:
                    vm.nearest_occupied(p)

            times = time_trials(run_map, trials, base_map.copy)
            method = "baseline" if case == "best" else "baseline_far"
            rows += [BenchRow("queries", method, n, i, t) for i, t in enumerate(times)]
    return rows


def bench_history_scaling(
    scene: BenchScene,
    histories: Sequence[int] = (10, 50, 100, 150),
    n_queries: int = 200,
    trials: int = 5,
    sigma: float = 0.05,
    seed: int = 1,
) -> list[BenchRow]:
    """Worst-case queries against histories of increasing length.

    ``wall_time_ns`` covers all ``n_queries``; ``aux`` is the mean search depth.
    """
    upto = max(histories)
    queries = _gaussians(worst_case_points(n_queries, seed), sigma)
    rows = []
    for h in histories:
        chain = scene.chain(h, upto)
        times = time_trials(lambda _: _run_queries(chain, queries, 1), trials)
        depth = float(np.mean([nanomap_query(chain, q).search_depth for q in queries]))
        rows += [BenchRow("history_scaling", "nanomap_worst", h, i, t, depth) for i, t in enumerate(times)]
    return rows


def correction_batch(scene: BenchScene, upto: int, n: int, offset=(0.05, -0.03, 0.0)) -> list[TimedPose]:
    """Corrected body poses at the timestamps of the newest ``n`` frames."""
    off = np.asarray(offset, dtype=np.float64)
    out = []
    for f in scene.frames[upto - n : upto]:
        p = interpolate_sequence(scene._times, scene._poses, f.time)
        out.append(TimedPose(f.time, RigidTransform(p.rotation, p.translation + off)))
    return out


def bench_pose_updates(
    scene: BenchScene,
    n_poses: Sequence[int] = (0, 10, 25, 50, 100, 150),
    trials: int = 5,
    history: int = 150,
) -> list[BenchRow]:
    """Adapt each map to ``n`` corrected poses covering the newest frames.

    ``chain`` splices the poses and re-derives the covered edges.
    ``baseline`` re-fuses only the affected clouds in place, and
    ``baseline_full`` (at the full window only) rebuilds the whole map.
    ``aux`` is the number of edges or clouds touched.
    """
    upto = history
    rows: list[BenchRow] = []
    vm = scene.baseline(history, upto)
    for n in n_poses:
        if not 0 <= n <= history:
            raise ValueError(f"n_poses {n} outside 0..{history}")
        batch = correction_batch(scene, upto, n)
        chain = scene.chain(history, upto)
        times = time_trials(lambda _: chain.apply_pose_updates(batch), trials)
        touched = chain.apply_pose_updates(batch)
        rows += [BenchRow("pose_updates", "chain", n, i, t, touched) for i, t in enumerate(times)]

        times = time_trials(lambda _: vm.update_poses(batch, FORWARD_MOUNT), trials)
        touched = vm.update_poses(batch, FORWARD_MOUNT)
        rows += [BenchRow("pose_updates", "baseline", n, i, t, touched) for i, t in enumerate(times)]
        if n == history:
            times = time_trials(lambda _: vm.rebuild(batch, FORWARD_MOUNT), trials)
            rows += [BenchRow("pose_updates", "baseline_full", n, i, t, n) for i, t in enumerate(times)]
    return rows


@dataclass(frozen=True)
class HistogramReport:
    metrics: ScenarioMetrics
    csv: str

    @property
    def depth1_fraction(self) -> float:
        return self.metrics.fraction_at_depth(1)

    @property
    def within40_fraction(self) -> float:
        return self.metrics.fraction_at_depth(40)

    def summary_line(self) -> str:
        return (
            f"# queries={self.metrics.total} depth1_fraction={self.depth1_fraction:.4f} "
            f"within40_fraction={self.within40_fraction:.4f}"
        )


def bench_histogram(config: ScenarioConfig, seed: int | None = None) -> HistogramReport:
    """Per-time-bucket search-depth counts for one scenario run."""
    m = run_scenario(config, seed=seed)
    return HistogramReport(m, m.histogram_csv())
