"""Naive fused world-frame voxel map, the comparison target for benchmarks.

Points are transformed into the world frame, quantized to cubic voxels and
counted; a voxel is occupied once ``hit_threshold`` points have landed in it.
There is no free-space carving.  Every fused cloud is logged with its pose so
the whole map can be re-fused after a pose correction.

Counts live in a dense int32 grid over the bounding box of everything fused
so far; the box grows (with padding) when new points fall outside it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .errors import NoDataError, OutOfRangeError
from .geometry import RigidTransform, TimedPose, compose, interpolate_sequence
from .kdtree import PointCloud

MAX_CELLS = 1 << 28
BLOCK = 8  # edge length, in cells, of the coarse occupancy blocks
_GROWTH_PAD = 16


@njit(cache=True)
def _quantize(points, valid, R, t, voxel):
    # World cells of the valid points plus their bounding box, in one pass.
    n = 0
    for i in range(valid.shape[0]):
        n += valid[i]
    cells = np.empty((n, 3), np.int64)
    lo = np.full(3, np.iinfo(np.int64).max)
    hi = np.full(3, np.iinfo(np.int64).min)
    m = 0
    for i in range(valid.shape[0]):
        if not valid[i]:
            continue
        x, y, z = points[i, 0], points[i, 1], points[i, 2]
        for a in range(3):
            w = R[a, 0] * x + R[a, 1] * y + R[a, 2] * z + t[a]
            c = np.int64(np.floor(w / voxel))
            cells[m, a] = c
            if c < lo[a]:
                lo[a] = c
            if c > hi[a]:
                hi[a] = c
        m += 1
    return cells, lo, hi


@njit(cache=True)
def _accumulate(grid, coarse, origin, cells, sign, threshold):
    # Keeps the per-block count of occupied cells in step with the grid.
    for i in range(cells.shape[0]):
        a = cells[i, 0] - origin[0]
        b = cells[i, 1] - origin[1]
        c = cells[i, 2] - origin[2]
        old = grid[a, b, c]
        new = old + sign
        grid[a, b, c] = new
        if old < threshold <= new:
            coarse[a // BLOCK, b // BLOCK, c // BLOCK] += 1
        elif new < threshold <= old:
            coarse[a // BLOCK, b // BLOCK, c // BLOCK] -= 1


@njit(cache=True)
def _nearest(grid, coarse, threshold, q):
    # q is the query in grid-index units (cell centres at index + 0.5).
    # Visits blocks in Chebyshev rings around the query's block; returns the
    # grid index of the closest occupied cell (ties: smallest index) or -1s.
    nb0, nb1, nb2 = coarse.shape
    qb = np.empty(3, np.int64)
    for a in range(3):
        qb[a] = np.int64(np.floor(q[a] / BLOCK))
    best = np.inf
    bi = bj = bk = -1
    max_ring = 0
    for a, n in enumerate((nb0, nb1, nb2)):
        max_ring = max(max_ring, abs(qb[a]), abs(n - 1 - qb[a]))
    for ring in range(max_ring + 1):
        if ring > 0:
            gap = (ring - 1) * BLOCK + 0.5
            if gap * gap >= best:
                break
        for x in range(max(qb[0] - ring, 0), min(qb[0] + ring, nb0 - 1) + 1):
            for y in range(max(qb[1] - ring, 0), min(qb[1] + ring, nb1 - 1) + 1):
                on_shell_xy = abs(x - qb[0]) == ring or abs(y - qb[1]) == ring
                for z in range(max(qb[2] - ring, 0), min(qb[2] + ring, nb2 - 1) + 1):
                    if not on_shell_xy and abs(z - qb[2]) != ring:
                        continue
                    if coarse[x, y, z] == 0:
                        continue
                    # Lower bound over the block's cell centres.
                    lb = 0.0
                    for a, bidx in ((0, x), (1, y), (2, z)):
                        lo = bidx * BLOCK + 0.5
                        hi = bidx * BLOCK + BLOCK - 0.5
                        if q[a] < lo:
                            lb += (lo - q[a]) ** 2
                        elif q[a] > hi:
                            lb += (q[a] - hi) ** 2
                    if lb > best:
                        continue
                    for i in range(x * BLOCK, min(x * BLOCK + BLOCK, grid.shape[0])):
                        dx = i + 0.5 - q[0]
                        for j in range(y * BLOCK, min(y * BLOCK + BLOCK, grid.shape[1])):
                            dy = j + 0.5 - q[1]
                            for k in range(z * BLOCK, min(z * BLOCK + BLOCK, grid.shape[2])):
                                if grid[i, j, k] < threshold:
                                    continue
                                dz = k + 0.5 - q[2]
                                d = dx * dx + dy * dy + dz * dz
                                if d < best or (
                                    d == best and (i, j, k) < (bi, bj, bk)
                                ):
                                    best = d
                                    bi, bj, bk = i, j, k
    return bi, bj, bk


@dataclass(frozen=True)
class FusedCloud:
    timestamp: float
    world_pose: RigidTransform  # sensor-to-world used when fusing
    cloud: PointCloud


class VoxelMap:
    def __init__(self, voxel_size: float = 0.25, hit_threshold: int = 1):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if hit_threshold < 1:
            raise ValueError("hit_threshold must be >= 1")
        self.voxel_size = float(voxel_size)
        self.hit_threshold = int(hit_threshold)
        self._origin = np.zeros(3, np.int64)  # cell coordinates of grid[0, 0, 0]
        self._grid = np.zeros((0, 0, 0), np.int32)
        self._coarse = np.zeros((0, 0, 0), np.int32)
        self.log: list[FusedCloud] = []

    # -- contents -----------------------------------------------------------

    def __len__(self) -> int:
        return int(np.count_nonzero(self._grid >= self.hit_threshold))

    def occupied_cells(self) -> np.ndarray:
        """Occupied integer cells (n, 3) in lexicographic order."""
        return np.argwhere(self._grid >= self.hit_threshold) + self._origin

    def count(self, cell) -> int:
        c = np.asarray(cell, dtype=np.int64) - self._origin
        if np.any(c < 0) or np.any(c >= self._grid.shape):
            return 0
        return int(self._grid[tuple(c)])

    def cell_centers(self, cells) -> np.ndarray:
        return (np.asarray(cells, dtype=np.float64) + 0.5) * self.voxel_size

    def cells_of(self, points) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64) / self.voxel_size).astype(np.int64)

    # -- updates -------------------------------------------------------------

    def _ensure(self, lo: np.ndarray, hi: np.ndarray) -> None:
        shape = np.array(self._grid.shape, np.int64)
        if self._grid.size and np.all(lo >= self._origin) and np.all(hi < self._origin + shape):
            return
        if self._grid.size:
            new_lo = np.minimum(lo - _GROWTH_PAD, self._origin)
            new_hi = np.maximum(hi + _GROWTH_PAD, self._origin + shape - 1)
        else:
            new_lo, new_hi = lo - _GROWTH_PAD, hi + _GROWTH_PAD
        new_shape = new_hi - new_lo + 1
        if np.prod(new_shape) > MAX_CELLS:
            raise MemoryError(f"voxel grid of shape {tuple(new_shape)} exceeds {MAX_CELLS} cells")
        grid = np.zeros(tuple(new_shape), np.int32)
        if self._grid.size:
            o = self._origin - new_lo
            grid[o[0] : o[0] + shape[0], o[1] : o[1] + shape[1], o[2] : o[2] + shape[2]] = self._grid
        self._grid = grid
        self._origin = new_lo
        self._coarse = self._block_counts()

    def _block_counts(self) -> np.ndarray:
        occ = self._grid >= self.hit_threshold
        nb = -(-np.array(occ.shape) // BLOCK)
        padded = np.zeros(tuple(nb * BLOCK), bool)
        padded[: occ.shape[0], : occ.shape[1], : occ.shape[2]] = occ
        blocks = padded.reshape(nb[0], BLOCK, nb[1], BLOCK, nb[2], BLOCK)
        return blocks.sum(axis=(1, 3, 5)).astype(np.int32)

    def _add_cells(self, cells: np.ndarray, lo=None, hi=None, sign: int = 1) -> None:
        if len(cells) == 0:
            return
        if lo is None:
            lo, hi = cells.min(axis=0), cells.max(axis=0)
        self._ensure(lo, hi)
        _accumulate(
            self._grid, self._coarse, self._origin, cells, np.int32(sign), np.int32(self.hit_threshold)
        )

    def _cloud_cells(self, cloud: PointCloud, world_pose: RigidTransform):
        return _quantize(
            cloud.points.reshape(-1, 3),
            cloud.valid.reshape(-1),
            world_pose.rotation,
            world_pose.translation,
            self.voxel_size,
        )

    def fuse(self, cloud: PointCloud, world_pose: RigidTransform, timestamp: float = 0.0) -> None:
        """Count every valid point of a sensor-frame cloud into the grid."""
        self._add_cells(*self._cloud_cells(cloud, world_pose))
        self.log.append(FusedCloud(float(timestamp), world_pose, cloud))

    def rebuild(self, corrected_poses: Sequence[TimedPose], mount: RigidTransform | None = None) -> VoxelMap:
        """Fresh map re-fusing every logged cloud at corrected poses.

        ``corrected_poses`` are body-to-world; ``mount`` is the sensor-to-body
        extrinsic.  Every logged timestamp must be interpolable.
        """
        times, poses, mount = self._correction_arrays(corrected_poses, mount)
        out = VoxelMap(self.voxel_size, self.hit_threshold)
        for i, rec in enumerate(self.log):
            if not (times and times[0] <= rec.timestamp <= times[-1]):
                raise OutOfRangeError(
                    f"cloud {i} at t={rec.timestamp} is not covered by the corrected poses"
                )
            out.fuse(rec.cloud, compose(interpolate_sequence(times, poses, rec.timestamp), mount), rec.timestamp)
        return out

    def update_poses(self, corrected_poses: Sequence[TimedPose], mount: RigidTransform | None = None) -> int:
        """Move only the logged clouds inside the corrections' span, in place.

        Each affected cloud is subtracted at its old pose and re-added at the
        corrected one.  Returns the number of clouds moved.
        """
        times, poses, mount = self._correction_arrays(corrected_poses, mount)
        if not times:
            return 0
        moved = 0
        for i, rec in enumerate(self.log):
            if not times[0] <= rec.timestamp <= times[-1]:
                continue
            pose = compose(interpolate_sequence(times, poses, rec.timestamp), mount)
            self._add_cells(*self._cloud_cells(rec.cloud, rec.world_pose), sign=-1)
            self._add_cells(*self._cloud_cells(rec.cloud, pose))
            self.log[i] = FusedCloud(rec.timestamp, pose, rec.cloud)
            moved += 1
        return moved

    @staticmethod
    def _correction_arrays(corrected_poses, mount):
        times = [float(p.time) for p in corrected_poses]
        poses = [p.pose for p in corrected_poses]
        return times, poses, mount or RigidTransform.identity()

    def copy(self) -> VoxelMap:
        out = VoxelMap(self.voxel_size, self.hit_threshold)
        out._grid = self._grid.copy()
        out._coarse = self._coarse.copy()
        out._origin = self._origin.copy()
        out.log = list(self.log)
        return out

    # -- queries -------------------------------------------------------------

    def nearest_occupied(self, query) -> tuple[np.ndarray, float]:
        """Centre of the occupied voxel closest to ``query`` and its distance.

        Exact.  Ties go to the lexicographically smallest cell.  Blocks of
        cells are visited in growing rings around the query and skipped when
        even their nearest cell centre cannot beat the best found so far.
        """
        q = np.asarray(query, dtype=np.float64).reshape(3)
        local = q / self.voxel_size - self._origin
        i, j, k = _nearest(self._grid, self._coarse, np.int32(self.hit_threshold), local)
        if i < 0:
            raise NoDataError("the voxel map is empty")
        center = self.cell_centers(np.array([i, j, k]) + self._origin)
        return center, float(np.linalg.norm(center - q))
