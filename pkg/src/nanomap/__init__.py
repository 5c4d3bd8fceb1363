"""Fusion-free local mapping over a history of depth views."""

from .chain import ChainConfig, FrameChain, SensorFrame
from .errors import (
    DegenerateProjectionError,
    LogFormatError,
    MonotonicityError,
    NanoMapError,
    NoDataError,
    OutOfRangeError,
)
from .geometry import (
    Aabb,
    CameraModel,
    GaussianPoint,
    RigidTransform,
    TimedPose,
    TransformEdge,
    compose,
    interpolate_pose,
    one_sigma_aabb,
    project,
    transform_gaussian,
)
from .kdtree import KdTree, PointCloud
from .query import Fov, QueryResult, is_in_fov, nanomap_query, neighbors_in_body_frame

__all__ = [
    "Aabb",
    "CameraModel",
    "ChainConfig",
    "DegenerateProjectionError",
    "Fov",
    "FrameChain",
    "GaussianPoint",
    "KdTree",
    "LogFormatError",
    "MonotonicityError",
    "NanoMapError",
    "NoDataError",
    "OutOfRangeError",
    "PointCloud",
    "QueryResult",
    "RigidTransform",
    "SensorFrame",
    "TimedPose",
    "TransformEdge",
    "compose",
    "interpolate_pose",
    "is_in_fov",
    "nanomap_query",
    "neighbors_in_body_frame",
    "one_sigma_aabb",
    "project",
    "transform_gaussian",
]
