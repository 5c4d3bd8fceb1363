"""Minimum-uncertainty nearest-neighbour queries against a frame chain.

A body-frame query point is pushed backwards through the history, newest
frame first, picking up each edge's translation covariance on the way.  The
first frame whose observed free space contains the point's 1-sigma box
answers the query.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numba import njit

from .chain import FrameChain, SensorFrame
from .errors import NoDataError
from .geometry import GaussianPoint, RigidTransform

OCCLUSION_MARGIN = 0.1


class Fov(enum.Enum):
    FREE_SPACE = "free_space"
    OUTSIDE_LATERAL = "outside_lateral"
    OUTSIDE_VERTICAL = "outside_vertical"
    OCCLUDED = "occluded"
    BEYOND_HORIZON = "beyond_horizon"
    BEHIND_SENSOR = "behind_sensor"


@dataclass(frozen=True)
class QueryResult:
    """Answer to one query.

    ``frame_index`` is None when no stored view contains the query; the
    query and neighbours are then those of the newest frame.  Neighbours are
    in the coordinates of the answering frame, nearest first.
    """

    frame_index: int | None
    query_in_frame: GaussianPoint
    neighbors: np.ndarray
    distances: np.ndarray
    search_depth: int
    grid_indices: np.ndarray

    @property
    def out_of_known_space(self) -> bool:
        return self.frame_index is None

    @property
    def answer_frame(self) -> int:
        return 0 if self.frame_index is None else self.frame_index


# Classifier outcomes in check order; index into _CODES.
_CODES = (
    Fov.FREE_SPACE,
    Fov.BEHIND_SENSOR,
    Fov.OUTSIDE_LATERAL,
    Fov.OUTSIDE_VERTICAL,
    Fov.BEYOND_HORIZON,
    Fov.OCCLUDED,
)


@njit(cache=True)
def _classify_code(mean, cov, lateral, lateral_abs, vertical, vertical_abs, K, min_range, max_range, valid, points, margin):
    h0 = np.sqrt(max(cov[0, 0], 0.0))
    h1 = np.sqrt(max(cov[1, 1], 0.0))
    h2 = np.sqrt(max(cov[2, 2], 0.0))
    x, y, z = mean[0], mean[1], mean[2]
    if z - h2 < min_range:
        return 1
    # A plane n . p >= 0 contains the box iff its least favourable corner passes.
    for i in range(lateral.shape[0]):
        n = lateral[i]
        a = lateral_abs[i]
        if n[0] * x + n[1] * y + n[2] * z - (a[0] * h0 + a[1] * h1 + a[2] * h2) < 0.0:
            return 2
    for i in range(vertical.shape[0]):
        n = vertical[i]
        a = vertical_abs[i]
        if n[0] * x + n[1] * y + n[2] * z - (a[0] * h0 + a[1] * h1 + a[2] * h2) < 0.0:
            return 3
    if z + h2 > max_range:
        return 4
    u = K[0, 0] * x + K[0, 1] * y + K[0, 2] * z
    v = K[1, 0] * x + K[1, 1] * y + K[1, 2] * z
    w = K[2, 0] * x + K[2, 1] * y + K[2, 2] * z
    rows, cols = valid.shape
    col = min(max(int(np.floor(u / w + 0.5)), 0), cols - 1)
    row = min(max(int(np.floor(v / w + 0.5)), 0), rows - 1)
    # Pixels without a return count as free out to max range.
    if valid[row, col] and points[row, col, 2] < z - margin:
        return 5
    return 0


def _classify(frame: SensorFrame, mean: np.ndarray, cov: np.ndarray, margin: float) -> Fov:
    cam = frame.camera
    code = _classify_code(
        mean, cov, cam._lateral, cam._lateral_abs, cam._vertical, cam._vertical_abs,
        cam.intrinsics, cam.min_range, cam.max_range, frame.cloud.valid, frame.cloud.points, margin,
    )
    return _CODES[code]


def is_in_fov(frame: SensorFrame, p: GaussianPoint, occlusion_margin: float = OCCLUSION_MARGIN) -> Fov:
    """Classify a sensor-frame Gaussian point against one frame's observed free space."""
    return _classify(frame, p.mean, p.covariance, occlusion_margin)


def _answer(frame: SensorFrame, index, mean, cov, depth, k) -> QueryResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    idx, d2 = frame.tree.query(mean, k)
    grid = frame.tree.grid_index[idx]
    nbrs = frame.cloud.points.reshape(-1, 3)[grid]
    return QueryResult(index, GaussianPoint._trusted(mean, cov), nbrs, np.sqrt(d2), depth, grid)


def nanomap_query(
    chain: FrameChain,
    query: GaussianPoint,
    k: int = 1,
    occlusion_margin: float = OCCLUSION_MARGIN,
) -> QueryResult:
    """Answer a body-frame query from the most recent view that contains it."""
    if chain.body_edge is None:
        raise NoDataError("the chain holds no frames")
    edge = chain.body_edge
    R = edge.transform.rotation
    mean = R @ query.mean + edge.transform.translation
    cov = edge.translation_covariance + R @ query.covariance @ R.T
    mean0, cov0 = mean, cov
    depth = 0
    first_frame = None
    for i, (edge, frame) in enumerate(chain.links()):
        if i == 0:
            first_frame = frame
        else:
            R = edge.transform.rotation
            mean = R @ mean + edge.transform.translation
            cov = edge.translation_covariance + R @ cov @ R.T
        depth += 1
        if _classify(frame, mean, cov, occlusion_margin) is Fov.FREE_SPACE:
            return _answer(frame, i, mean, 0.5 * (cov + cov.T), depth, k)
    return _answer(first_frame, None, mean0, 0.5 * (cov0 + cov0.T), depth, k)


def query_many(chain: FrameChain, queries, k: int = 1, **kwargs) -> list[QueryResult]:
    return [nanomap_query(chain, q, k, **kwargs) for q in queries]


def neighbors_in_body_frame(chain: FrameChain, result: QueryResult) -> np.ndarray:
    """Map a result's neighbours back into current body coordinates, order kept."""
    if len(result.neighbors) == 0:
        return np.empty((0, 3))
    to_frame: RigidTransform = chain.body_to_frame(result.answer_frame)
    return to_frame.inverse().apply(result.neighbors)
