"""Static worlds of boxes and spheres, and a ray-cast depth camera."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ..geometry import CameraModel, RigidTransform
from ..kdtree import PointCloud


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(hi <= lo):
            raise ValueError(f"box must have positive extent, got {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to the box surface."""
        p = np.atleast_2d(points)
        outside = np.linalg.norm(np.maximum(np.maximum(self.lo - p, p - self.hi), 0.0), axis=1)
        inside = np.minimum(p - self.lo, self.hi - p).min(axis=1)
        return np.where(inside > 0, inside, outside)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "radius", float(self.radius))

    def distance(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.abs(np.linalg.norm(p - self.center, axis=1) - self.radius)


@dataclass(frozen=True)
class World:
    boxes: tuple[Box, ...] = field(default_factory=tuple)
    spheres: tuple[Sphere, ...] = field(default_factory=tuple)

    @property
    def shapes(self) -> tuple:
        return tuple(self.boxes) + tuple(self.spheres)

    def key(self) -> tuple:
        """Hashable description of the geometry."""
        return (
            tuple((tuple(b.lo), tuple(b.hi)) for b in self.boxes),
            tuple((tuple(s.center), s.radius) for s in self.spheres),
        )

    def distance(self, points) -> np.ndarray:
        """Distance from each point to the nearest obstacle surface (inf if none)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = np.full(len(p), np.inf)
        for shape in self.shapes:
            d = np.minimum(d, shape.distance(p))
        return d


@njit(cache=True)
def _cast(origin, dirs, box_lo, box_hi, centers, radii, t_min, t_max):
    # Smallest ray parameter in [t_min, t_max] at which each ray meets a
    # surface, or inf.
    n = dirs.shape[0]
    out = np.full(n, np.inf)
    for r in range(n):
        best = np.inf
        for b in range(box_lo.shape[0]):
            near = -np.inf
            far = np.inf
            for a in range(3):
                d = dirs[r, a]
                if d == 0.0:
                    if origin[a] < box_lo[b, a] or origin[a] > box_hi[b, a]:
                        near = np.inf
                        break
                    continue
                t0 = (box_lo[b, a] - origin[a]) / d
                t1 = (box_hi[b, a] - origin[a]) / d
                if t0 > t1:
                    t0, t1 = t1, t0
                near = max(near, t0)
                far = min(far, t1)
            if near > far:
                continue
            t = near if near >= t_min else far
            if t >= t_min and t < best:
                best = t
        for s in range(centers.shape[0]):
            ox = origin[0] - centers[s, 0]
            oy = origin[1] - centers[s, 1]
            oz = origin[2] - centers[s, 2]
            dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
            qa = dx * dx + dy * dy + dz * dz
            qb = dx * ox + dy * oy + dz * oz
            qc = ox * ox + oy * oy + oz * oz - radii[s] * radii[s]
            disc = qb * qb - qa * qc
            if disc < 0:
                continue
            root = np.sqrt(disc)
            t = (-qb - root) / qa
            if t < t_min:
                t = (-qb + root) / qa
            if t >= t_min and t < best:
                best = t
        if best <= t_max:
            out[r] = best
    return out


def render_depth(world: World, camera_pose: RigidTransform, camera: CameraModel) -> PointCloud:
    """Ray-cast an organized cloud in sensor coordinates from a sensor-to-world pose.

    Each pixel ray has unit z in the sensor frame, so the ray parameter is the
    depth.  The nearest surface between min_range and max_range is kept.
    """
    rays = camera.pixel_rays().reshape(-1, 3)
    dirs = np.ascontiguousarray(rays @ camera_pose.rotation.T)
    boxes_lo = np.array([b.lo for b in world.boxes]).reshape(-1, 3)
    boxes_hi = np.array([b.hi for b in world.boxes]).reshape(-1, 3)
    centers = np.array([s.center for s in world.spheres]).reshape(-1, 3)
    radii = np.array([s.radius for s in world.spheres], dtype=np.float64)
    t = _cast(
        camera_pose.translation, dirs, boxes_lo, boxes_hi, centers, radii,
        camera.min_range, camera.max_range,
    )
    valid = np.isfinite(t)
    pts = np.where(valid[:, None], rays * np.where(valid, t, 0.0)[:, None], 0.0)
    return PointCloud(pts.reshape(camera.rows, camera.cols, 3), valid.reshape(camera.rows, camera.cols))
