"""Trajectory accuracy (APE) and map memory accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Sequence
from .geometry import Pose
from .slam.graph import PoseGraph


def ape(estimated: list[Pose], gt: list[Pose]) -> float:
    """Absolute pose error: translational RMSE after rigid alignment.

    The estimated trajectory is aligned to ground truth by the closed-form
    least-squares rigid transform over positions (rotation + translation, no
    scale), which removes the gauge freedom before scoring.
    """
    if len(estimated) != len(gt):
        raise ValueError(f"length mismatch: {len(estimated)} estimated vs {len(gt)} gt")
    if len(estimated) < 2:
        raise ValueError("need at least 2 poses")
    est = np.array([p.translation for p in estimated])
    ref = np.array([p.translation for p in gt])
    mu_e, mu_r = est.mean(axis=0), ref.mean(axis=0)
    h = (est - mu_e).T @ (ref - mu_r)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    aligned = (est - mu_e) @ r.T + mu_r
    residuals = np.linalg.norm(aligned - ref, axis=1)
    return float(np.sqrt((residuals**2).mean()))


@dataclass(frozen=True)
class MemoryReport:
    descriptor_map_bytes: int  # keyframe descriptors + poses, float32 accounting
    raw_bytes: int  # every raw scan point as float32 xyz
    voxel_map_bytes: int
    voxel_size: float
    n_keyframes: int
    n_scans: int

    @property
    def savings_ratio(self) -> float:
        if self.raw_bytes == 0:
            return 0.0
        return 1.0 - self.descriptor_map_bytes / self.raw_bytes

    def as_dict(self) -> dict:
        return {
            "descriptor_map_bytes": self.descriptor_map_bytes,
            "raw_bytes": self.raw_bytes,
            "voxel_map_bytes": self.voxel_map_bytes,
            "voxel_size": self.voxel_size,
            "n_keyframes": self.n_keyframes,
            "n_scans": self.n_scans,
            "savings_ratio": self.savings_ratio,
        }


def memory_report(graph: PoseGraph, raw: Sequence, voxel_size: float = 0.2) -> MemoryReport:
    """Compare the descriptor map's footprint with raw and voxelized storage.

    Descriptor bytes follow the serialized payload exactly: each keyframe
    stores M*(3+C) float32 descriptor values plus a 12-float32 pose.
    """
    descriptor_bytes = graph.payload_bytes()
    raw_bytes = sum(len(scan) * 3 * 4 for scan in raw.scans)
    voxel_bytes = _voxel_bytes(graph, raw, voxel_size)
    return MemoryReport(
        descriptor_map_bytes=descriptor_bytes,
        raw_bytes=raw_bytes,
        voxel_map_bytes=voxel_bytes,
        voxel_size=voxel_size,
        n_keyframes=len(graph),
        n_scans=len(raw),
    )


def _voxel_bytes(graph: PoseGraph, raw: Sequence, voxel_size: float) -> int:
    """Occupied-voxel count of the aggregated map, one float32 center each."""
    poses = raw.gt_poses
    occupied: set[tuple[int, int, int]] = set()
    for i, scan in enumerate(raw.scans):
        if len(scan) == 0:
            continue
        pts = scan.points
        if poses is not None and i < len(poses):
            pts = poses[i].apply(pts)
        keys = np.floor(pts / voxel_size).astype(np.int64)
        occupied.update(map(tuple, keys))
    return len(occupied) * 3 * 4
