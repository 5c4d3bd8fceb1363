"""Rigid transforms, Gaussian points, pinhole projection and pose interpolation.

Conventions:
    - ``RigidTransform`` T maps a point p expressed in its source frame to
      ``T(p) = R @ p + t`` in its target frame.  ``compose(a, b)`` applies b
      first, then a.
    - Sensor frames are right-down-forward.  Pixel (row, col) has its centre at
      image coordinates (u, v) = (col, row); the image spans
      u in [-0.5, cols - 0.5] and v in [-0.5, rows - 0.5].
    - Quaternions are (w, x, y, z).
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DegenerateProjectionError, OutOfRangeError

ORTHONORMAL_TOL = 1e-9
SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _as_vec3(v, name: str) -> np.ndarray:
    arr = np.array(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {arr.shape}")
    return arr


def _as_mat3(m, name: str) -> np.ndarray:
    arr = np.array(m, dtype=np.float64)
    if arr.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {arr.shape}")
    return arr


def checked_covariance(cov, name: str = "covariance") -> np.ndarray:
    """Validate a 3x3 covariance and return its symmetrized copy."""
    c = _as_mat3(cov, name)
    if not np.all(np.isfinite(c)):
        raise ValueError(f"{name} has non-finite entries")
    asym = np.max(np.abs(c - c.T))
    scale = max(1.0, float(np.max(np.abs(c))))
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"{name} is not symmetric (max asymmetry {asym:.3g})")
    c = 0.5 * (c + c.T)
    if np.any(c.diagonal() < -PSD_TOL) or np.linalg.eigvalsh(c)[0] < -PSD_TOL * scale:
        raise ValueError(f"{name} is not positive semi-definite")
    return c


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion with rotation ``R`` and translation ``t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _as_mat3(self.rotation, "rotation")
        t = _as_vec3(self.translation, "translation")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def _trusted(cls, rotation: np.ndarray, translation: np.ndarray) -> RigidTransform:
        # Skips validation and copying; only for products of already validated
        # transforms held in read-only float64 arrays.
        obj = object.__new__(cls)
        obj.__dict__.update(rotation=rotation, translation=translation)
        return obj

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> RigidTransform:
        return cls(np.eye(3), (x, y, z))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, q, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(quaternion_to_matrix(q), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)

    def apply(self, points) -> np.ndarray:
        """Map a single point (3,) or an array of points (n, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation))

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def almost_equal(self, other: RigidTransform, tol: float = 1e-9) -> bool:
        return bool(
            np.max(np.abs(self.rotation - other.rotation)) <= tol
            and np.max(np.abs(self.translation - other.translation)) <= tol
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform applying ``b`` first and ``a`` second."""
    return RigidTransform(
        a.rotation @ b.rotation, a.rotation @ b.translation + a.translation
    )


@dataclass(frozen=True)
class TransformEdge:
    """Relative transform with a known rotation and a noisy translation."""

    transform: RigidTransform
    translation_covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        cov = checked_covariance(self.translation_covariance, "translation_covariance")
        object.__setattr__(self, "translation_covariance", _frozen(cov))

    @classmethod
    def identity(cls) -> TransformEdge:
        return cls(RigidTransform.identity())

    @classmethod
    def _trusted(cls, transform: RigidTransform, covariance: np.ndarray) -> TransformEdge:
        obj = object.__new__(cls)
        obj.__dict__.update(transform=transform, translation_covariance=covariance)
        return obj


@dataclass(frozen=True)
class GaussianPoint:
    """A 3D point distributed as N(mean, covariance)."""

    mean: np.ndarray
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        mean = _as_vec3(self.mean, "mean")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean has non-finite entries")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "covariance", _frozen(checked_covariance(self.covariance)))

    @classmethod
    def _trusted(cls, mean: np.ndarray, covariance: np.ndarray) -> GaussianPoint:
        # For propagated points whose covariance is PSD by construction.
        obj = object.__new__(cls)
        obj.__dict__.update(mean=_frozen(mean), covariance=_frozen(covariance))
        return obj

    @classmethod
    def isotropic(cls, mean, sigma: float) -> GaussianPoint:
        return cls(mean, np.eye(3) * float(sigma) ** 2)


def transform_gaussian(edge: TransformEdge, p: GaussianPoint) -> GaussianPoint:
    """Push a Gaussian point through a noisy-translation edge.

    mean' = R mean + t and covariance' = edge covariance + R cov R^T, assuming
    the point and the edge translation are independent.
    """
    R = edge.transform.rotation
    mean = R @ p.mean + edge.transform.translation
    cov = edge.translation_covariance + R @ p.covariance @ R.T
    return GaussianPoint(mean, 0.5 * (cov + cov.T))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole depth camera with intrinsics ``K`` and a valid depth interval."""

    intrinsics: np.ndarray
    rows: int
    cols: int
    max_range: float
    min_range: float = 0.2

    def __post_init__(self):
        K = _as_mat3(self.intrinsics, "intrinsics")
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("resolution must be positive")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if np.any(K[1:, 0] != 0) or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("intrinsics must be upper triangular with K[2,2] = 1")
        if not (-0.5 <= K[0, 2] <= self.cols - 0.5 and -0.5 <= K[1, 2] <= self.rows - 0.5):
            raise ValueError("principal point lies outside the image")
        if not (0 < self.min_range < self.max_range):
            raise ValueError("require 0 < min_range < max_range")
        object.__setattr__(self, "intrinsics", _frozen(K))
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        object.__setattr__(self, "max_range", float(self.max_range))
        object.__setattr__(self, "min_range", float(self.min_range))
        # Frustum side planes n . p >= 0 in sensor coordinates.
        u_lo, u_hi = -0.5, self.cols - 0.5
        v_lo, v_hi = -0.5, self.rows - 0.5
        ez = K[2]
        lateral = np.array([K[0] - u_lo * ez, u_hi * ez - K[0]])
        vertical = np.array([K[1] - v_lo * ez, v_hi * ez - K[1]])
        object.__setattr__(self, "_lateral", _frozen(lateral))
        object.__setattr__(self, "_lateral_abs", _frozen(np.abs(lateral)))
        object.__setattr__(self, "_vertical", _frozen(vertical))
        object.__setattr__(self, "_vertical_abs", _frozen(np.abs(vertical)))
        object.__setattr__(self, "_K_inv", _frozen(np.linalg.inv(K)))

    @classmethod
    def from_fov(
        cls,
        cols: int,
        rows: int,
        hfov_deg: float,
        vfov_deg: float,
        max_range: float,
        min_range: float = 0.2,
    ) -> CameraModel:
        """Camera whose image edges subtend the given horizontal/vertical FOV."""
        fx = (cols / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        fy = (rows / 2.0) / math.tan(math.radians(vfov_deg) / 2.0)
        cx = (cols - 1) / 2.0
        cy = (rows - 1) / 2.0
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, rows, cols, max_range, min_range)

    @property
    def inverse_intrinsics(self) -> np.ndarray:
        return self._K_inv

    def pixel_rays(self) -> np.ndarray:
        """Rays K^-1 [u, v, 1] for every pixel centre, shape (rows, cols, 3), z == 1."""
        v, u = np.mgrid[0 : self.rows, 0 : self.cols].astype(np.float64)
        uv1 = np.stack([u, v, np.ones_like(u)], axis=-1)
        rays = uv1 @ self._K_inv.T
        rays[..., 2] = 1.0
        return rays

    def pixel_of(self, u: float, v: float) -> tuple[int, int] | None:
        """(row, col) of the pixel containing image point (u, v), or None."""
        col = math.floor(u + 0.5)
        row = math.floor(v + 0.5)
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row, col
        return None


def project(camera: CameraModel, point) -> tuple[float, float, float]:
    """Project a sensor-frame point; returns (u, v, z) with (x, y, z) = K p.

    z may be negative (point behind the sensor); z == 0 raises
    ``DegenerateProjectionError``.
    """
    x, y, z = camera.intrinsics @ np.asarray(point, dtype=np.float64)
    if z == 0.0:
        raise DegenerateProjectionError("point lies in the sensor's focal plane")
    return float(x / z), float(y / z), float(z)


@dataclass(frozen=True)
class Aabb:
    center: np.ndarray
    half_widths: np.ndarray

    def __post_init__(self):
        c = _as_vec3(self.center, "center")
        h = _as_vec3(self.half_widths, "half_widths")
        if np.any(h < 0):
            raise ValueError("half_widths must be non-negative")
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "half_widths", _frozen(h))

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all(np.abs(p - self.center) <= self.half_widths + tol, axis=-1)


def one_sigma_aabb(p: GaussianPoint) -> Aabb:
    """Tight axis-aligned box around the 1-sigma ellipsoid of ``p``."""
    return Aabb(p.mean, np.sqrt(np.clip(p.covariance.diagonal(), 0.0, None)))


# --- rotations -----------------------------------------------------------


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 (Shepperd's method)."""
    m = R
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle, angle in [0, pi]) of ``R``."""
    w, x, y, z = matrix_to_quaternion(R)
    s = math.sqrt(x * x + y * y + z * z)
    if s < 1e-300:
        return np.zeros(3)
    angle = 2.0 * math.atan2(s, w)
    return np.array([x, y, z]) * (angle / s)


def rotation_exp(rotvec) -> np.ndarray:
    """Rodrigues' formula."""
    rv = np.asarray(rotvec, dtype=np.float64)
    theta = math.sqrt(float(rv @ rv))
    if theta < 1e-12:
        k = np.array([[0.0, -rv[2], rv[1]], [rv[2], 0.0, -rv[0]], [-rv[1], rv[0], 0.0]])
        return np.eye(3) + k + 0.5 * (k @ k)
    k = rv / theta
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


# --- timestamped poses ---------------------------------------------------


@dataclass(frozen=True)
class TimedPose:
    time: float
    pose: RigidTransform


@njit(cache=True)
def _slerp_rotation(Ra, Rb, s):
    # Ra @ exp(s * log(Ra^T Rb)), with log taken through the unit quaternion.
    M = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            M[i, j] = Ra[0, i] * Rb[0, j] + Ra[1, i] * Rb[1, j] + Ra[2, i] * Rb[2, j]
    tr = M[0, 0] + M[1, 1] + M[2, 2]
    if tr > 0:
        d = 2.0 * np.sqrt(tr + 1.0)
        w, x, y, z = 0.25 * d, (M[2, 1] - M[1, 2]) / d, (M[0, 2] - M[2, 0]) / d, (M[1, 0] - M[0, 1]) / d
    elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
        d = 2.0 * np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
        w, x, y, z = (M[2, 1] - M[1, 2]) / d, 0.25 * d, (M[0, 1] + M[1, 0]) / d, (M[0, 2] + M[2, 0]) / d
    elif M[1, 1] > M[2, 2]:
        d = 2.0 * np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
        w, x, y, z = (M[0, 2] - M[2, 0]) / d, (M[0, 1] + M[1, 0]) / d, 0.25 * d, (M[1, 2] + M[2, 1]) / d
    else:
        d = 2.0 * np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
        w, x, y, z = (M[1, 0] - M[0, 1]) / d, (M[0, 2] + M[2, 0]) / d, (M[1, 2] + M[2, 1]) / d, 0.25 * d
    n = np.sqrt(w * w + x * x + y * y + z * z)
    if w < 0:
        n = -n
    w, x, y, z = w / n, x / n, y / n, z / n
    v = np.sqrt(x * x + y * y + z * z)
    r0 = r1 = r2 = 0.0
    if v >= 1e-300:
        f = s * 2.0 * np.arctan2(v, w) / v
        r0, r1, r2 = x * f, y * f, z * f
    theta = np.sqrt(r0 * r0 + r1 * r1 + r2 * r2)
    if theta < 1e-12:
        a, b = 1.0, 0.5
        k0, k1, k2 = r0, r1, r2
    else:
        a, b = np.sin(theta), 1.0 - np.cos(theta)
        k0, k1, k2 = r0 / theta, r1 / theta, r2 / theta
    K = np.array([[0.0, -k2, k1], [k2, 0.0, -k0], [-k1, k0, 0.0]])
    E = np.eye(3)
    for i in range(3):
        for j in range(3):
            kk = K[i, 0] * K[0, j] + K[i, 1] * K[1, j] + K[i, 2] * K[2, j]
            E[i, j] += a * K[i, j] + b * kk
    R = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            R[i, j] = Ra[i, 0] * E[0, j] + Ra[i, 1] * E[1, j] + Ra[i, 2] * E[2, j]
    return R


@njit(cache=True)
def _interpolate_many(times, rotations, translations, query):
    m = query.shape[0]
    R = np.empty((m, 3, 3))
    t = np.empty((m, 3))
    for q in range(m):
        i = np.searchsorted(times, query[q])
        if times[i] == query[q]:
            R[q] = rotations[i]
            t[q] = translations[i]
            continue
        s = (query[q] - times[i - 1]) / (times[i] - times[i - 1])
        R[q] = _slerp_rotation(rotations[i - 1], rotations[i], s)
        for a in range(3):
            ta = translations[i - 1, a]
            t[q, a] = ta + s * (translations[i, a] - ta)
    return R, t


def interpolate_pose(a: TimedPose, b: TimedPose, t: float) -> RigidTransform:
    """Pose at time ``t`` between two timestamped poses.

    Translation is linear in time; rotation follows the constant angular
    velocity path from ``a`` to ``b``.  Never extrapolates.
    """
    if not a.time < b.time:
        raise OutOfRangeError(f"interpolation needs a.time < b.time ({a.time} vs {b.time})")
    if not a.time <= t <= b.time:
        raise OutOfRangeError(f"time {t} outside [{a.time}, {b.time}]")
    if t == a.time:
        return a.pose
    if t == b.time:
        return b.pose
    s = (t - a.time) / (b.time - a.time)
    R = _slerp_rotation(a.pose.rotation, b.pose.rotation, s)
    ta, tb = a.pose.translation, b.pose.translation
    return RigidTransform(R, ta + s * (tb - ta))


def interpolate_sequence(times, poses, t: float) -> RigidTransform:
    """Interpolate within a time-sorted pose sequence (parallel lists)."""
    n = len(times)
    if n == 0 or t < times[0] or t > times[-1]:
        raise OutOfRangeError(f"time {t} is not bracketed by the pose sequence")
    i = bisect.bisect_left(times, t)
    if times[i] == t:
        return poses[i]
    return interpolate_pose(TimedPose(times[i - 1], poses[i - 1]), TimedPose(times[i], poses[i]), t)


def interpolate_many(times, poses, query_times) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``interpolate_sequence``: rotations (m, 3, 3) and translations (m, 3)."""
    times = np.asarray(times, dtype=np.float64)
    q = np.asarray(query_times, dtype=np.float64).reshape(-1)
    if len(q) == 0:
        return np.empty((0, 3, 3)), np.empty((0, 3))
    if len(times) == 0 or q.min() < times[0] or q.max() > times[-1]:
        raise OutOfRangeError("query times are not bracketed by the pose sequence")
    rotations = np.array([p.rotation for p in poses])
    translations = np.array([p.translation for p in poses])
    return _interpolate_many(times, rotations, translations, q)
