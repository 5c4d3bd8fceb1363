"""History of depth frames linked by noisy relative transforms.

The chain is a doubly-linked list of (edge, frame) pairs, newest first.  The
edge stored with the frame at position i maps coordinates of frame i-1 into
frame i; the newest frame has no edge and is instead reached from the current
body frame through ``body_edge``.

Poses, clouds and pose corrections arrive asynchronously.  All mutation goes
through one writer; readers (queries) may run concurrently only while no
mutation is in progress.
"""

from __future__ import annotations

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import MonotonicityError, OutOfRangeError
from .geometry import (
    CameraModel,
    RigidTransform,
    TimedPose,
    TransformEdge,
    checked_covariance,
    compose,
    interpolate_many,
    interpolate_sequence,
)
from .kdtree import DEFAULT_LEAF_SIZE, KdTree, PointCloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensorFrame:
    timestamp: float
    cloud: PointCloud
    tree: KdTree
    camera: CameraModel


@dataclass
class ChainConfig:
    """Tunable parameters of a ``FrameChain``.

    ``edge_sigma`` is the translation covariance assigned to every
    inter-frame edge; the body edge uses it scaled by the time elapsed since
    the newest frame in units of ``frame_period``.  ``mount`` is the
    sensor-to-body extrinsic.
    """

    capacity: int = 150
    edge_sigma: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    frame_period: float = 1.0 / 30.0
    mount: RigidTransform = field(default_factory=RigidTransform.identity)
    camera: CameraModel | None = None
    pending_limit: int = 8
    pose_retention: float = 1.0
    leaf_size: int = DEFAULT_LEAF_SIZE

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.frame_period <= 0:
            raise ValueError("frame_period must be positive")
        self.edge_sigma = checked_covariance(self.edge_sigma, "edge_sigma")


class _Link:
    __slots__ = ("frame", "edge", "world_pose", "newer", "older")

    def __init__(self, frame: SensorFrame, world_pose: RigidTransform):
        self.frame = frame
        self.world_pose = world_pose  # sensor-to-world at frame.timestamp
        self.edge: TransformEdge | None = None
        self.newer: _Link | None = None
        self.older: _Link | None = None


def _relative(target_world: RigidTransform, source_world: RigidTransform) -> RigidTransform:
    """Transform mapping source-frame coordinates into target-frame coordinates."""
    Rt = target_world.rotation.T
    R = Rt @ source_world.rotation
    t = Rt @ (source_world.translation - target_world.translation)
    R.flags.writeable = False
    t.flags.writeable = False
    return RigidTransform._trusted(R, t)


class FrameChain:
    """The NanoMap store: a bounded, newest-first chain of sensor frames."""

    def __init__(self, config: ChainConfig | None = None):
        self.config = config or ChainConfig()
        self._head: _Link | None = None
        self._tail: _Link | None = None
        self._length = 0
        self._pose_times: list[float] = []
        self._poses: list[RigidTransform] = []
        self._pending: deque[tuple[SensorFrame, np.ndarray | None]] = deque()
        self.body_edge: TransformEdge | None = None
        self.link_ops = 0  # pointer rewiring count, for structural checks

    # -- inspection --------------------------------------------------------

    def __len__(self) -> int:
        return self._length

    @property
    def capacity(self) -> int:
        return self.config.capacity

    @property
    def pending(self) -> int:
        return len(self._pending)

    @property
    def pose_times(self) -> list[float]:
        return list(self._pose_times)

    @property
    def newest_pose(self) -> TimedPose | None:
        if not self._poses:
            return None
        return TimedPose(self._pose_times[-1], self._poses[-1])

    def links(self) -> Iterator[tuple[TransformEdge | None, SensorFrame]]:
        """(edge, frame) pairs from newest to oldest; the newest edge is None."""
        link = self._head
        while link is not None:
            yield link.edge, link.frame
            link = link.older

    def frames(self) -> list[SensorFrame]:
        return [frame for _, frame in self.links()]

    def edges(self) -> list[TransformEdge]:
        """Inter-frame edges, edges()[i-1] mapping frame i-1 into frame i."""
        return [edge for edge, _ in self.links()][1:]

    def world_poses(self) -> list[RigidTransform]:
        """Sensor-to-world pose of each frame, newest first, as last computed."""
        out = []
        link = self._head
        while link is not None:
            out.append(link.world_pose)
            link = link.older
        return out

    def body_to_frame(self, index: int) -> RigidTransform:
        """Mean transform from current body coordinates into frame ``index``."""
        if self.body_edge is None or not 0 <= index < self._length:
            raise IndexError(f"no frame at index {index}")
        T = self.body_edge.transform
        link = self._head.older
        for _ in range(index):
            T = compose(link.edge.transform, T)
            link = link.older
        return T

    def pose_at(self, t: float) -> RigidTransform:
        """Interpolated body-to-world pose from the pose buffer."""
        return interpolate_sequence(self._pose_times, self._poses, t)

    # -- ingestion ---------------------------------------------------------

    def add_pose(self, pose: TimedPose) -> None:
        """Append a body-to-world pose and refresh the body edge."""
        if self._pose_times and pose.time < self._pose_times[-1]:
            raise MonotonicityError(
                f"pose at t={pose.time} is older than the newest pose t={self._pose_times[-1]}"
            )
        if self._pose_times and pose.time == self._pose_times[-1]:
            self._poses[-1] = pose.pose
        else:
            self._pose_times.append(float(pose.time))
            self._poses.append(pose.pose)
        self._flush_pending()
        self._update_body_edge()
        self._prune_poses()

    def add_cloud(
        self,
        cloud: PointCloud,
        timestamp: float,
        camera: CameraModel | None = None,
        edge_covariance=None,
        tree: KdTree | None = None,
    ) -> bool:
        """Build the cloud's k-d tree and insert it as the newest frame.

        Returns True if the frame was inserted now, False if it was parked
        until a pose newer than ``timestamp`` arrives.  ``edge_covariance``
        overrides ``edge_sigma`` for the edge linking this frame to the
        previous one.  A ``tree`` built beforehand (e.g. on a worker thread)
        from this same cloud skips the build.
        """
        camera = camera or self.config.camera
        if camera is None:
            raise ValueError("no camera model given and none configured")
        if cloud.shape != (camera.rows, camera.cols):
            raise ValueError(f"cloud shape {cloud.shape} does not match camera resolution")
        newest = self._head.frame.timestamp if self._head is not None else None
        if self._pending:
            newest = max(newest if newest is not None else -np.inf, self._pending[-1][0].timestamp)
        if newest is not None and timestamp <= newest:
            raise MonotonicityError(f"cloud at t={timestamp} is not newer than t={newest}")
        if self._pose_times and timestamp < self._pose_times[0]:
            raise OutOfRangeError(f"cloud at t={timestamp} predates the pose buffer")
        cov = None if edge_covariance is None else checked_covariance(edge_covariance)
        if tree is None:
            tree = KdTree(cloud, self.config.leaf_size)
        elif tree.cloud is not cloud:
            raise ValueError("tree was built from a different cloud")
        frame = SensorFrame(float(timestamp), cloud, tree, camera)
        self._pending.append((frame, cov))
        self._flush_pending()
        if self._pending and self._pending[-1][0] is frame:
            if len(self._pending) > self.config.pending_limit:
                dropped = self._pending.popleft()[0]
                log.warning("pending queue full, dropping cloud at t=%s", dropped.timestamp)
            return False
        self._update_body_edge()
        self._prune_poses()
        return True

    def apply_pose_updates(self, corrections: Sequence[TimedPose]) -> int:
        """Splice corrected body-to-world poses into the history.

        An inter-frame edge is recomputed only when both of its frames lie
        inside the corrections' time span.  Edge covariances are kept.
        Returns the number of inter-frame edges rewritten; the body edge is
        refreshed as well whenever the newest frame is covered.
        """
        if not corrections:
            return 0
        times = [float(c.time) for c in corrections]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise MonotonicityError("corrections must be strictly time-ordered")
        poses = [c.pose for c in corrections]
        t0, t1 = times[0], times[-1]

        lo = bisect.bisect_left(self._pose_times, t0)
        hi = bisect.bisect_right(self._pose_times, t1)
        self._pose_times[lo:hi] = times
        self._poses[lo:hi] = poses

        covered = []
        link = self._head
        while link is not None and link.frame.timestamp >= t0:
            if link.frame.timestamp <= t1:
                covered.append(link)
            link = link.older
        rewritten = 0
        if covered:
            ts = np.array([lk.frame.timestamp for lk in covered])
            Rb, tb = interpolate_many(times, poses, ts)
            mount = self.config.mount
            Rw = Rb @ mount.rotation
            tw = Rb @ mount.translation + tb
            # Relative transform from each covered frame's newer neighbour.
            Rrel = np.transpose(Rw[1:], (0, 2, 1)) @ Rw[:-1]
            trel = np.einsum("nji,nj->ni", Rw[1:], tw[:-1] - tw[1:])
            for a in (Rw, tw, Rrel, trel):
                a.flags.writeable = False
            for j, lk in enumerate(covered):
                lk.world_pose = RigidTransform._trusted(Rw[j], tw[j])
                if j > 0:
                    lk.edge = TransformEdge._trusted(
                        RigidTransform._trusted(Rrel[j - 1], trel[j - 1]),
                        lk.edge.translation_covariance,
                    )
                    rewritten += 1
        self._update_body_edge()
        return rewritten

    def trim(self, new_capacity: int) -> None:
        if new_capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.config.capacity = int(new_capacity)
        while self._length > new_capacity:
            self._pop_oldest()
        self._prune_poses()

    # -- internals ---------------------------------------------------------

    def _bracketed(self, t: float) -> bool:
        return bool(self._pose_times) and self._pose_times[0] <= t <= self._pose_times[-1]

    def _flush_pending(self) -> None:
        while self._pending and self._bracketed(self._pending[0][0].timestamp):
            frame, cov = self._pending.popleft()
            self._insert(frame, cov)

    def _insert(self, frame: SensorFrame, cov) -> None:
        world = compose(self.pose_at(frame.timestamp), self.config.mount)
        link = _Link(frame, world)
        old = self._head
        if old is not None:
            old.edge = TransformEdge(
                _relative(old.world_pose, world),
                self.config.edge_sigma if cov is None else cov,
            )
            old.newer = link
            link.older = old
        else:
            self._tail = link
        self._head = link
        self._length += 1
        self.link_ops += 1
        while self._length > self.config.capacity:
            self._pop_oldest()

    def _pop_oldest(self) -> None:
        tail = self._tail
        self._tail = tail.newer
        if self._tail is None:
            self._head = None
        else:
            self._tail.older = None
        tail.newer = None
        self._length -= 1
        self.link_ops += 1

    def _update_body_edge(self) -> None:
        if self._head is None or not self._poses:
            self.body_edge = None
            return
        t_body = self._pose_times[-1]
        dt = max(0.0, t_body - self._head.frame.timestamp)
        cov = self.config.edge_sigma * (dt / self.config.frame_period)
        cov.flags.writeable = False
        self.body_edge = TransformEdge._trusted(_relative(self._head.world_pose, self._poses[-1]), cov)

    def _prune_poses(self) -> None:
        refs = []
        if self._tail is not None:
            refs.append(self._tail.frame.timestamp)
        if self._pending:
            refs.append(self._pending[0][0].timestamp)
        if not refs and self._pose_times:
            refs.append(self._pose_times[-1])
        if not refs:
            return
        cutoff = min(refs) - self.config.pose_retention
        # Keep the last pose at or before the cutoff so the window edge stays bracketed.
        n = bisect.bisect_right(self._pose_times, cutoff) - 1
        if n > 0:
            del self._pose_times[:n]
            del self._poses[:n]
