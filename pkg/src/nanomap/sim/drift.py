"""Odometry drift from noisy horizontal accelerations.

Each horizontal acceleration sample is corrupted as ``(a + eta) * xi`` with
``eta ~ N(0, sigma^2)`` and ``xi ~ N(1, sigma^2)`` and integrated twice.  The
corrupted trajectory is truth plus the integrated error, so zero noise gives
back the truth exactly.  Height and attitude are never corrupted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..geometry import RigidTransform, TimedPose


@dataclass(frozen=True)
class DriftConfig:
    sigma_actual: float = 0.0
    rate: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_actual < 0:
            raise ValueError("sigma_actual must be >= 0")
        if self.rate <= 0:
            raise ValueError("rate must be positive")


def _noise(sigma: float, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    eta = rng.normal(0.0, sigma, (n, 2))
    xi = rng.normal(1.0, sigma, (n, 2))
    return eta, xi


def _integrate(err: np.ndarray, dt: float, starts: Sequence[int]) -> np.ndarray:
    # Position error with zero position and velocity error at each start index:
    # d[k+1] = 2 d[k] - d[k-1] + err[k] dt^2.
    n = len(err)
    out = np.zeros_like(err)
    bounds = sorted(set(int(s) for s in starts if 0 <= s < n) | {0}) + [n]
    for r0, r1 in zip(bounds[:-1], bounds[1:]):
        vel = np.cumsum(err[r0 : r1 - 1], axis=0)
        out[r0 + 1 : r1] = np.cumsum(vel, axis=0) * dt * dt
    return out


def horizontal_drift(
    positions: np.ndarray,
    dt: float,
    cfg: DriftConfig,
    reset_indices: Sequence[int] = (),
) -> np.ndarray:
    """Integrated x/y position error (n, 2) for a uniformly sampled path."""
    p = np.asarray(positions, dtype=np.float64)[:, :2]
    n = len(p)
    if n < 3:
        raise ValueError("need at least 3 poses to difference accelerations")
    acc = np.zeros((n, 2))
    acc[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / (dt * dt)
    eta, xi = _noise(cfg.sigma_actual, n, cfg.seed)
    err = (acc + eta) * xi - acc
    # No acceleration can be recovered at the two ends.
    err[0] = 0.0
    err[-1] = 0.0
    return _integrate(err, dt, reset_indices)


def corrupt_trajectory(
    truth: Sequence[TimedPose],
    cfg: DriftConfig,
    reset_times: Sequence[float] = (),
) -> list[TimedPose]:
    """Drifted copy of a uniformly sampled truth trajectory.

    ``reset_times`` zero the accumulated position and velocity error, as if
    an external estimator had snapped the state back to truth.
    """
    if len(truth) < 3:
        raise ValueError("need at least 3 poses to difference accelerations")
    times = np.array([p.time for p in truth])
    pos = np.array([p.pose.translation for p in truth])
    dt = 1.0 / cfg.rate
    resets = np.searchsorted(times, np.asarray(reset_times, dtype=np.float64))
    d = horizontal_drift(pos, dt, cfg, resets)
    out = []
    for p, (dx, dy) in zip(truth, d):
        if dx == 0.0 and dy == 0.0:
            out.append(p)
        else:
            t = p.pose.translation + np.array([dx, dy, 0.0])
            out.append(TimedPose(p.time, RigidTransform(p.pose.rotation, t)))
    return out


def window_drift(cfg: DriftConfig, window: float, n_seeds: int = 1000) -> np.ndarray:
    """Final x/y drift (n_seeds, 2) of a stationary vehicle after ``window`` seconds.

    Seed i uses ``cfg.seed + i``, the same noise stream ``corrupt_trajectory``
    would draw.
    """
    n = int(round(window * cfg.rate)) + 1
    dt = 1.0 / cfg.rate
    still = np.zeros((n, 3))
    out = np.empty((n_seeds, 2))
    for i in range(n_seeds):
        seeded = DriftConfig(cfg.sigma_actual, cfg.rate, cfg.seed + i)
        out[i] = horizontal_drift(still, dt, seeded)[-1]
    return out


def derive_edge_sigma(
    cfg: DriftConfig, history_len: int = 150, window: float = 5.0, n_seeds: int = 1000
) -> np.ndarray:
    """Per-edge covariance: Monte Carlo drift covariance over the window / history_len."""
    if history_len <= 0:
        raise ValueError("history_len must be positive")
    cov = np.zeros((3, 3))
    if cfg.sigma_actual == 0:
        return cov
    d = window_drift(cfg, window, n_seeds)
    cov[:2, :2] = d.T @ d / len(d)
    return cov / history_len
