"""Organized point clouds and a per-frame 3D k-d tree.

The tree splits at the median of the axis with the widest extent and stores
leaves of at most ``leaf_size`` points.  k-nearest-neighbour queries are
exact; equal distances are ordered by ascending row-major grid index.
"""

from __future__ import annotations

import numpy as np
from numba import njit

DEFAULT_LEAF_SIZE = 16


class PointCloud:
    """Row-major grid of sensor-frame points with a validity mask.

    Invalid pixels (no return) keep a zero point so the grid round-trips
    exactly; every valid point must have z > 0.
    """

    __slots__ = ("points", "valid")

    def __init__(self, points, valid=None):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError(f"points must have shape (rows, cols, 3), got {pts.shape}")
        if valid is None:
            valid = np.all(np.isfinite(pts), axis=2) & (np.nan_to_num(pts[..., 2]) > 0)
        valid = np.array(valid, dtype=bool)
        if valid.shape != pts.shape[:2]:
            raise ValueError("valid mask shape does not match the grid")
        pts[~valid] = 0.0
        if not np.all(np.isfinite(pts)):
            raise ValueError("valid points must be finite")
        if np.any(pts[..., 2][valid] <= 0):
            raise ValueError("valid points must have z > 0")
        pts.flags.writeable = False
        valid.flags.writeable = False
        self.points = pts
        self.valid = valid

    @classmethod
    def empty(cls, rows: int, cols: int) -> PointCloud:
        return cls(np.zeros((rows, cols, 3)), np.zeros((rows, cols), dtype=bool))

    @property
    def rows(self) -> int:
        return self.points.shape[0]

    @property
    def cols(self) -> int:
        return self.points.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.points.shape[:2]

    def valid_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Valid points (n, 3) and their row-major grid indices (ascending)."""
        idx = np.flatnonzero(self.valid.reshape(-1))
        return self.points.reshape(-1, 3)[idx], idx

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return bool(
            self.shape == other.shape
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.points, other.points)
        )

    def __repr__(self) -> str:
        return f"PointCloud({self.rows}x{self.cols}, valid={int(self.valid.sum())})"


@njit(cache=True)
def _build(pts_in, leaf_size):
    # Works on a reordered copy so that every node owns a contiguous slice.
    n = pts_in.shape[0]
    pts = pts_in.copy()
    perm = np.arange(n)
    max_nodes = 4 * (n // leaf_size + 1) + 1
    start = np.zeros(max_nodes, np.int64)
    end = np.zeros(max_nodes, np.int64)
    dim_of = np.full(max_nodes, -1, np.int64)
    split = np.zeros(max_nodes, np.float64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    n_nodes = 1
    end[0] = n
    stack = np.zeros(max_nodes, np.int64)
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        s = start[node]
        e = end[node]
        if e - s <= leaf_size:
            continue
        lo0 = hi0 = pts[s, 0]
        lo1 = hi1 = pts[s, 1]
        lo2 = hi2 = pts[s, 2]
        for m in range(s + 1, e):
            v = pts[m, 0]
            if v < lo0:
                lo0 = v
            elif v > hi0:
                hi0 = v
            v = pts[m, 1]
            if v < lo1:
                lo1 = v
            elif v > hi1:
                hi1 = v
            v = pts[m, 2]
            if v < lo2:
                lo2 = v
            elif v > hi2:
                hi2 = v
        d = 0
        extent = hi0 - lo0
        if hi1 - lo1 > extent:
            d = 1
            extent = hi1 - lo1
        if hi2 - lo2 > extent:
            d = 2
        mid = s + (e - s) // 2
        # Hoare quickselect: pts[mid, d] becomes the median, smaller values
        # to the left, larger to the right.
        lo = s
        hi = e - 1
        while hi > lo:
            a = pts[lo, d]
            b = pts[(lo + hi) // 2, d]
            c = pts[hi, d]
            if a < b:
                pivot = b if b < c else (c if a < c else a)
            else:
                pivot = a if a < c else (c if b < c else b)
            i = lo
            j = hi
            while i <= j:
                while pts[i, d] < pivot:
                    i += 1
                while pts[j, d] > pivot:
                    j -= 1
                if i <= j:
                    for a_ in range(3):
                        t = pts[i, a_]
                        pts[i, a_] = pts[j, a_]
                        pts[j, a_] = t
                    ti = perm[i]
                    perm[i] = perm[j]
                    perm[j] = ti
                    i += 1
                    j -= 1
            if mid <= j:
                hi = j
            elif mid >= i:
                lo = i
            else:
                break
        dim_of[node] = d
        split[node] = pts[mid, d]
        left[node] = n_nodes
        start[n_nodes] = s
        end[n_nodes] = mid
        right[node] = n_nodes + 1
        start[n_nodes + 1] = mid
        end[n_nodes + 1] = e
        stack[sp] = n_nodes
        stack[sp + 1] = n_nodes + 1
        sp += 2
        n_nodes += 2
    return (
        pts,
        perm,
        start[:n_nodes].copy(),
        end[:n_nodes].copy(),
        dim_of[:n_nodes].copy(),
        split[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
    )


@njit(cache=True)
def _knn(pts, perm, start, end, dim_of, split, left, right, q, k, out_idx, out_d):
    # Returns the number of neighbours written.  Order key is (distance, index).
    count = 0
    stack_node = np.empty(128, np.int64)
    stack_bound = np.empty(128, np.float64)
    sp = 1
    stack_node[0] = 0
    stack_bound[0] = 0.0
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        if count == k and stack_bound[sp] > out_d[k - 1]:
            continue
        d = dim_of[node]
        if d < 0:
            for m in range(start[node], end[node]):
                idx = perm[m]
                dx = pts[m, 0] - q[0]
                dy = pts[m, 1] - q[1]
                dz = pts[m, 2] - q[2]
                dist = dx * dx + dy * dy + dz * dz
                if count == k:
                    last_d = out_d[k - 1]
                    if dist > last_d or (dist == last_d and idx > out_idx[k - 1]):
                        continue
                    pos = k - 1
                else:
                    pos = count
                    count += 1
                while pos > 0 and (
                    out_d[pos - 1] > dist or (out_d[pos - 1] == dist and out_idx[pos - 1] > idx)
                ):
                    out_d[pos] = out_d[pos - 1]
                    out_idx[pos] = out_idx[pos - 1]
                    pos -= 1
                out_d[pos] = dist
                out_idx[pos] = idx
            continue
        diff = q[d] - split[node]
        if diff < 0:
            near = left[node]
            far = right[node]
        else:
            near = right[node]
            far = left[node]
        # Far side first on the stack so the near side is explored first.
        stack_node[sp] = far
        stack_bound[sp] = diff * diff
        stack_node[sp + 1] = near
        stack_bound[sp + 1] = 0.0
        sp += 2
    return count


@njit(cache=True)
def _knn_batch(pts, perm, start, end, dim_of, split, left, right, queries, k):
    m = queries.shape[0]
    out_idx = np.full((m, k), -1, np.int64)
    out_d = np.full((m, k), np.inf)
    counts = np.zeros(m, np.int64)
    for i in range(m):
        counts[i] = _knn(
            pts, perm, start, end, dim_of, split, left, right, queries[i], k, out_idx[i], out_d[i]
        )
    return out_idx, out_d, counts


class KdTree:
    """Balanced k-d tree over the valid points of one organized cloud.

    Immutable after construction; concurrent queries are safe.  Neighbour
    indices returned by ``query`` are positions in ``points`` (valid points in
    row-major grid order); ``grid_index`` maps them back to the grid.
    """

    def __init__(self, cloud: PointCloud, leaf_size: int = DEFAULT_LEAF_SIZE):
        if leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        pts, grid_index = cloud.valid_points()
        self.cloud = cloud
        self.grid_index = grid_index
        self.leaf_size = int(leaf_size)
        self._flat = cloud.points.reshape(-1, 3)
        if len(pts):
            self._nodes = _build(np.ascontiguousarray(pts), self.leaf_size)
        else:
            self._nodes = None

    def __len__(self) -> int:
        return len(self.grid_index)

    @property
    def points(self) -> np.ndarray:
        return self._flat[self.grid_index]

    @property
    def node_count(self) -> int:
        return 0 if self._nodes is None else len(self._nodes[2])

    def query(self, point, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Positions into ``points`` and squared distances of the k nearest."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if self._nodes is None:
            return np.empty(0, np.int64), np.empty(0)
        k = min(int(k), len(self))
        q = np.asarray(point, dtype=np.float64)
        out_idx = np.full(k, -1, np.int64)
        out_d = np.full(k, np.inf)
        count = _knn(*self._nodes, q, k, out_idx, out_d)
        return out_idx[:count], out_d[:count]

    def query_many(self, queries, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Batched ``query``; returns (m, k') index and squared-distance arrays."""
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        if k < 1:
            raise ValueError("k must be >= 1")
        if self._nodes is None:
            return np.empty((len(q), 0), np.int64), np.empty((len(q), 0))
        k = min(int(k), len(self))
        idx, d, _ = _knn_batch(*self._nodes, q, k)
        return idx, d

    def neighbors(self, point, k: int = 1) -> np.ndarray:
        idx, _ = self.query(point, k)
        return self._flat[self.grid_index[idx]]


def build(cloud: PointCloud, leaf_size: int = DEFAULT_LEAF_SIZE) -> KdTree:
    return KdTree(cloud, leaf_size)


def knn(tree: KdTree, query, k: int = 1) -> np.ndarray:
    """The k valid points closest to ``query``, nearest first, shape (<=k, 3)."""
    return tree.neighbors(query, k)
