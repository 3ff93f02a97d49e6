"""LiDAR SLAM on sparse neural descriptor clouds.

Dense scans are compressed into descriptor clouds by a set-abstraction
encoder; a transformer decoder registers descriptor clouds at any scale
(scan-to-scan, scan-to-map, map-to-map) through similarity matching,
predicted positional offsets and a weighted closed-form rigid solve.
A pose-graph engine builds the map with adaptive keyframing and verified
loop closures, and a cooperative hub extends the same machinery to
multiple agents over a bandwidth-metered channel.
"""

from .geometry import (
    Correspondence,
    DescriptorCloud,
    PointCloud,
    Pose,
    farthest_point_sample,
    knn,
    merge_descriptor_clouds,
    se3_compose,
    se3_inverse,
    transform_points,
)
from .encoder import EncoderConfig, encode
from .decoder import (
    DecoderConfig,
    RegistrationResult,
    register,
    solve_transform,
    top_k_correspondences,
)
from .nn import ParameterStore, load_weights, save_weights
from .slam.engine import SlamConfig, SlamEngine
from .slam.graph import Edge, Observation, PoseGraph
from .slam.optimize import optimize_pose_graph
from .evaluation import ape, memory_report

__version__ = "0.1.0"

__all__ = [
    "Correspondence",
    "DecoderConfig",
    "DescriptorCloud",
    "Edge",
    "EncoderConfig",
    "Observation",
    "ParameterStore",
    "PointCloud",
    "Pose",
    "PoseGraph",
    "RegistrationResult",
    "SlamConfig",
    "SlamEngine",
    "ape",
    "encode",
    "farthest_point_sample",
    "knn",
    "load_weights",
    "memory_report",
    "merge_descriptor_clouds",
    "optimize_pose_graph",
    "register",
    "save_weights",
    "se3_compose",
    "se3_inverse",
    "solve_transform",
    "top_k_correspondences",
    "transform_points",
]
