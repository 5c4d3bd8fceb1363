"""Feed logged poses, corrections, clouds and queries through a frame chain."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .chain import ChainConfig, FrameChain
from .logs import CloudRecord, CorrectionBatch, PoseRecord, QueryRecord
from .query import QueryResult, nanomap_query, neighbors_in_body_frame

REPLAY_COLUMNS = (
    "time",
    "query_id",
    "frame_index",
    "out_of_known_space",
    "search_depth",
    "mu_x",
    "mu_y",
    "mu_z",
    "trace_cov",
    "n_neighbors",
    "nn_x",
    "nn_y",
    "nn_z",
    "nn_dist",
)

# Processing order for events sharing a timestamp.
POSE, CORRECTION, CLOUD, QUERY = range(4)


@dataclass(frozen=True)
class ReplayRow:
    time: float
    query_id: int
    result: QueryResult
    nearest_body: np.ndarray | None  # nearest neighbour in body coordinates

    def fields(self) -> list[str]:
        r = self.result
        mu = r.query_in_frame.mean
        nn = self.nearest_body
        nn_vals = ["", "", "", ""] if nn is None else [*map(_g, nn), _g(r.distances[0])]
        return [
            _g(self.time),
            str(self.query_id),
            str(-1 if r.out_of_known_space else r.frame_index),
            str(int(r.out_of_known_space)),
            str(r.search_depth),
            *map(_g, mu),
            _g(np.trace(r.query_in_frame.covariance)),
            str(len(r.neighbors)),
            *nn_vals,
        ]


def _g(x) -> str:
    return "%.12g" % float(x)


def replay(
    poses: Sequence[PoseRecord],
    clouds: Iterable[CloudRecord],
    queries: Sequence[QueryRecord],
    corrections: Sequence[CorrectionBatch] = (),
    config: ChainConfig | None = None,
    k: int = 1,
) -> Iterator[ReplayRow]:
    """Replay streams in time order; yields one row per answerable query.

    At equal timestamps poses go first, then corrections, clouds, queries.
    Queries issued before any frame is stored are skipped.
    """
    chain = FrameChain(config or ChainConfig())
    events: list[tuple[float, int, int]] = []
    events += [(p.time, POSE, i) for i, p in enumerate(poses)]
    events += [(b.time, CORRECTION, i) for i, b in enumerate(corrections)]
    events += [(q.time, QUERY, i) for i, q in enumerate(queries)]
    events.sort()
    pos = 0

    def run_until(key):
        nonlocal pos
        while pos < len(events) and events[pos][:2] < key:
            t, kind, i = events[pos]
            pos += 1
            if kind == POSE:
                chain.add_pose(poses[i].timed_pose())
            elif kind == CORRECTION:
                chain.apply_pose_updates([p.timed_pose() for p in corrections[i].poses])
            elif chain.body_edge is not None:
                res = nanomap_query(chain, queries[i].point, k)
                nb = neighbors_in_body_frame(chain, res)
                yield ReplayRow(t, i, res, nb[0] if len(nb) else None)

    for rec in clouds:
        yield from run_until((rec.time, CLOUD))
        chain.add_cloud(rec.cloud, rec.time, camera=rec.camera)
    yield from run_until((math.inf, QUERY + 1))


def rows_to_csv(rows: Iterable[ReplayRow], out: io.TextIOBase | None = None) -> str | None:
    buf = out if out is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPLAY_COLUMNS)
    for row in rows:
        w.writerow(row.fields())
    return buf.getvalue() if out is None else None

