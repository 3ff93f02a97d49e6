from .graph import Edge, Observation, PoseGraph, load_graph, save_graph
from .optimize import OptimizeReport, optimize_pose_graph
from .engine import SlamConfig, SlamEngine

__all__ = [
    "Edge",
    "Observation",
    "OptimizeReport",
    "PoseGraph",
    "SlamConfig",
    "SlamEngine",
    "load_graph",
    "optimize_pose_graph",
    "save_graph",
]
