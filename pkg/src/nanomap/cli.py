"""Command-line entry point: replay logs, run single queries, benchmarks and exports.

Every option can also come from a YAML config file (``--config`` or the
``NANOMAP_CONFIG`` environment variable).  The file holds one mapping per
subcommand, keyed by the subcommand name, with option names spelled as on
the command line (dashes or underscores).  Flags given on the command line
win over the file.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import bench
from .chain import ChainConfig
from .errors import NanoMapError
from .geometry import GaussianPoint, RigidTransform, TimedPose
from .logs import (
    CloudRecord,
    CorrectionBatch,
    PoseRecord,
    QueryRecord,
    iter_cloud_log,
    read_correction_log,
    read_pose_log,
    read_query_file,
    write_cloud_log,
    write_correction_log,
    write_pose_log,
    write_query_file,
)
from .replay import replay, rows_to_csv
from .sim.scenario import (
    FORWARD_MOUNT,
    correction_schedule,
    estimated_poses,
    load_scenario,
    render_frames,
    truth_poses,
)

CONFIG_ENV = "NANOMAP_CONFIG"
MOUNTS = {"identity": RigidTransform.identity(), "forward": FORWARD_MOUNT}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# -- config files ------------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise CliError(f"config {path} is not valid YAML: {str(e).splitlines()[0]}") from None
    if data is None:
        return {}
    if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
        raise CliError(f"config {path} must map subcommand names to option mappings")
    return data


def _apply_config(sub: argparse.ArgumentParser, section: dict, name: str) -> None:
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in section.items():
        dest = str(key).replace("-", "_")
        if dest not in dests or dest == "help":
            raise CliError(f"config section '{name}' has unknown option '{key}'")
        action = dests[dest]
        if action.nargs in ("+", "*") or (isinstance(action.nargs, int) and action.nargs > 1):
            value = list(value) if isinstance(value, (list, tuple)) else [value]
            if action.type is not None:
                value = [action.type(v) for v in value]
        elif action.type is not None and value is not None:
            value = action.type(value)
        defaults[dest] = value
    sub.set_defaults(**defaults)


def _require(args, *names: str) -> None:
    for n in names:
        if getattr(args, n) is None:
            raise CliError(f"--{n.replace('_', '-')} is required (flag or config file)")


# -- chain configuration -----------------------------------------------------


def _edge_covariance(args) -> np.ndarray:
    if args.edge_covariance is not None:
        cov = np.asarray(args.edge_covariance, dtype=np.float64)
        if cov.shape != (3, 3):
            raise CliError("edge_covariance must be a 3x3 matrix")
        return cov
    sigma = np.asarray(args.edge_sigma, dtype=np.float64)
    if sigma.shape not in ((1,), (3,)) or np.any(sigma < 0):
        raise CliError("--edge-sigma takes 1 or 3 non-negative standard deviations")
    return np.diag(np.broadcast_to(sigma, (3,)) ** 2)


def _chain_config(args) -> ChainConfig:
    return ChainConfig(
        capacity=args.capacity,
        edge_sigma=_edge_covariance(args),
        frame_period=args.frame_period,
        mount=MOUNTS[args.mount],
    )


def _add_chain_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--poses", help="pose log (time tx ty tz qw qx qy qz)")
    p.add_argument("--clouds", help="cloud log")
    p.add_argument("--corrections", help="correction log")
    p.add_argument("--k", type=int, default=1, help="neighbours per query")
    p.add_argument("--capacity", type=int, default=150, help="frames kept in the history")
    p.add_argument("--edge-sigma", type=float, nargs="+", default=[0.01],
                   help="per-edge translation std dev, 1 or 3 values (m)")
    p.add_argument("--edge-covariance", type=None, default=None, help=argparse.SUPPRESS)
    p.add_argument("--frame-period", type=float, default=1.0 / 30.0, help="nominal time between clouds (s)")
    p.add_argument("--mount", choices=sorted(MOUNTS), default="identity",
                   help="sensor-to-body extrinsic")
    p.add_argument("-o", "--output", help="write CSV here instead of stdout")


def _read_streams(args):
    _require(args, "poses", "clouds")
    poses = read_pose_log(args.poses)
    corrections = read_correction_log(args.corrections) if args.corrections else []
    return poses, iter_cloud_log(args.clouds), corrections


def _write(args, text: str) -> None:
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands -------------------------------------------------------------


def cmd_replay(args) -> None:
    _require(args, "queries")
    queries = read_query_file(args.queries)
    poses, clouds, corrections = _read_streams(args)
    rows = replay(poses, clouds, queries, corrections, _chain_config(args), args.k)
    _write(args, rows_to_csv(rows))


def cmd_query(args) -> None:
    _require(args, "point")
    poses, clouds, corrections = _read_streams(args)
    if not poses:
        raise CliError(f"{args.poses}: no poses")
    t = poses[-1].time if args.time is None else args.time
    q = QueryRecord(t, GaussianPoint(args.point, np.eye(3) * args.sigma**2))
    rows = list(replay(poses, clouds, [q], corrections, _chain_config(args), args.k))
    if not rows:
        raise CliError(f"no frame is stored by t={t}")
    _write(args, rows_to_csv(rows))


def _bench_output(args, rows) -> None:
    _write(args, bench.rows_csv(rows))
    if args.summary:
        Path(args.summary).write_text(bench.summary_csv(bench.summarize(rows)))


def cmd_bench_queries(args) -> None:
    scene = bench.BenchScene.load(args.scene)
    rows = bench.bench_queries(
        scene, args.n_queries, args.trials, args.history, workers=args.workers
    )
    if args.histories:
        rows += bench.bench_history_scaling(scene, args.histories, trials=args.trials)
    _bench_output(args, rows)


def cmd_bench_pose_updates(args) -> None:
    scene = bench.BenchScene.load(args.scene)
    _bench_output(args, bench.bench_pose_updates(scene, args.n_poses, args.trials, args.history))


def cmd_bench_histogram(args) -> None:
    report = bench.bench_histogram(load_scenario(args.scenario), seed=args.seed)
    _write(args, report.csv)
    print(report.summary_line(), file=sys.stderr)


def cmd_export_scenario(args) -> None:
    cfg = load_scenario(args.scenario)
    if args.seed is not None:
        cfg = replace(cfg, drift=replace(cfg.drift, seed=args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = export_scenario(cfg, out, args.frame_stride, args.duration, ".gz" if args.gzip else "")
    for f in files:
        print(f)


def export_scenario(cfg, out: Path, frame_stride: int = 1, duration: float | None = None, suffix: str = "") -> list[Path]:
    """Write the streams a scenario feeds its chain, plus a replay config.

    Poses are the drifted estimates, clouds are truth-rendered, corrections
    are the configured schedule and queries are the scenario's sample fan.
    """
    if frame_stride < 1:
        raise CliError("--frame-stride must be >= 1")
    truth = truth_poses(cfg)
    t_end = truth[-1].time if duration is None else truth[0].time + duration
    schedule = correction_schedule(cfg, truth)
    est = [p for p in estimated_poses(cfg, truth, schedule) if p.time <= t_end + 1e-9]
    frames = [f for f in render_frames(cfg)[::frame_stride] if f.time <= t_end + 1e-9]
    cam = cfg.camera.model()

    batches = [
        CorrectionBatch(tc, tuple(PoseRecord.from_pose(p) for p in poses))
        for tc, poses in schedule
        if tc <= t_end + 1e-9
    ]
    c = cfg.corrections
    if c.mode == "jump" and c.trigger <= t_end:
        # The history is moved by the same offset as the live estimate.
        horizon = cfg.capacity / cfg.camera.rate + 1.0
        off = np.asarray(c.offset, dtype=np.float64)
        shifted = tuple(
            PoseRecord.from_pose(TimedPose(p.time, RigidTransform(p.pose.rotation, p.pose.translation + off)))
            for p in est
            if c.trigger - horizon <= p.time < c.trigger
        )
        if shifted:
            batches.append(CorrectionBatch(c.trigger, shifted))

    times = [p.time for p in est]
    queries = []
    cov = np.eye(3) * cfg.samples.sigma**2
    n_q = int(math.floor((t_end - truth[0].time) * cfg.query_rate + 1e-9))
    for i in range(n_q):
        tq = truth[0].time + (i + 1) / cfg.query_rate
        j = int(np.searchsorted(times, tq + 1e-9)) - 1
        if j < 0:
            continue
        for m in cfg.samples.points(est[j].pose):
            queries.append(QueryRecord(tq, GaussianPoint(m, cov)))

    paths = {
        "poses": out / f"poses.log{suffix}",
        "clouds": out / f"clouds.log{suffix}",
        "corrections": out / f"corrections.log{suffix}",
        "queries": out / f"queries.txt{suffix}",
    }
    write_pose_log(paths["poses"], (PoseRecord.from_pose(p) for p in est))
    write_cloud_log(paths["clouds"], (CloudRecord(f.time, cam, f.cloud) for f in frames))
    write_correction_log(paths["corrections"], batches)
    write_query_file(paths["queries"], queries)
    replay_cfg = {
        "replay": {
            **{k: str(v.resolve()) for k, v in paths.items()},
            "k": cfg.k,
            "capacity": cfg.capacity,
            "edge_covariance": cfg.chain_edge_sigma().tolist(),
            "frame_period": frame_stride / cfg.camera.rate,
            "mount": "forward",
        }
    }
    cfg_path = out / "replay.yaml"
    cfg_path.write_text(yaml.safe_dump(replay_cfg, sort_keys=False))
    return [*paths.values(), cfg_path]


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nanomap", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help=f"YAML config file (default: ${CONFIG_ENV})")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = subs.add_parser("replay", help="replay logs and answer a query file")
    _add_chain_options(p)
    p.add_argument("--queries", help="query file (time mx my mz [sigma | 6 covariance terms])")
    p.set_defaults(func=cmd_replay)

    p = subs.add_parser("query", help="replay logs, then answer one body-frame query")
    _add_chain_options(p)
    p.add_argument("--point", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--sigma", type=float, default=0.0, help="isotropic std dev of the query point")
    p.add_argument("--time", type=float, help="query time (default: last pose)")
    p.set_defaults(func=cmd_query)

    p = subs.add_parser("bench-queries", help="query cost: insert one cloud then n queries")
    p.add_argument("--scene", default="bench_reference", help="scenario name or YAML path")
    p.add_argument("--n-queries", type=int, nargs="+", default=[0, 10, 100, 500, 1000, 2500])
    p.add_argument("--histories", type=int, nargs="*", default=[10, 50, 100, 150],
                   help="history lengths for the worst-case scaling sweep (empty to skip)")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--history", type=int, default=150)
    p.add_argument("--workers", type=int, default=1, help="threads for query fan-out")
    p.add_argument("--summary", help="also write mean and standard error per point here")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bench_queries)

    p = subs.add_parser("bench-pose-updates", help="cost of adapting each map to corrected poses")
    p.add_argument("--scene", default="bench_reference")
    p.add_argument("--n-poses", type=int, nargs="+", default=[0, 10, 25, 50, 100, 150])
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--history", type=int, default=150)
    p.add_argument("--summary")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bench_pose_updates)

    p = subs.add_parser("bench-histogram", help="search depth over time for one scenario")
    p.add_argument("--scenario", default="forward_corridor")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bench_histogram)

    p = subs.add_parser("export-scenario", help="write a scenario's streams as log files")
    p.add_argument("--scenario", default="forward_corridor")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--frame-stride", type=int, default=1, help="keep every n-th cloud")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.add_argument("--gzip", action="store_true", help="compress the logs")
    p.set_defaults(func=cmd_export_scenario)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config_path = _config_path(argv)
        config = _load_config(config_path)
        subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        for name, section in config.items():
            if name not in subs.choices:
                raise CliError(f"config {config_path} has unknown section '{name}'")
            _apply_config(subs.choices[name], section, name)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        if args.command == "export-scenario":
            _require(args, "out_dir")
        args.func(args)
    except CliError as e:
        print(f"nanomap: error: {e}", file=sys.stderr)
        return 2
    except (NanoMapError, ValueError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        if isinstance(e, OSError) and e.filename:
            msg = f"{e.filename}: {e.strerror}"
        print(f"nanomap: error: {msg}", file=sys.stderr)
        return 1
    return 0


def _config_path(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config":
            if i + 1 >= len(argv):
                raise CliError("--config needs a path")
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return os.environ.get(CONFIG_ENV) or None


if __name__ == "__main__":
    sys.exit(main())
