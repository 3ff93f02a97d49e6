"""Random occlusion augmentation: virtual boxes cast shadows over the scan.

Boxes with random size and position are dropped into the scene; every point
whose line of sight from the sensor passes through (or ends inside) a box is
removed, mimicking vehicles blocking the LiDAR.
"""

from __future__ import annotations

import numpy as np

from ..geometry import PointCloud


def segment_intersects_box(
    starts: np.ndarray, ends: np.ndarray, box_min: np.ndarray, box_max: np.ndarray
) -> np.ndarray:
    """Vectorized slab test: does each segment intersect the AABB?"""
    d = ends - starts
    # avoid division by zero; parallel rays handled by the bounds check below
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box_min - starts) / d
        t2 = (box_max - starts) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # axes where the segment is parallel to the slab: inside iff start within bounds
    parallel = d == 0
    inside = (starts >= box_min) & (starts <= box_max)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=1)
    exit_ = tmax.min(axis=1)
    return (enter <= exit_) & (exit_ >= 0.0) & (enter <= 1.0)


def random_occlusion(
    cloud: PointCloud,
    n_boxes: int,
    size_range: tuple[float, float],
    seed: int,
) -> PointCloud:
    """Remove all points shadowed by randomly placed axis-aligned boxes."""
    if n_boxes == 0 or len(cloud) == 0:
        return cloud
    rng = np.random.default_rng(seed)
    pts = cloud.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    removed = np.zeros(len(cloud), dtype=bool)
    starts = np.broadcast_to(cloud.origin, pts.shape)
    for _ in range(n_boxes):
        center = rng.uniform(lo, hi)
        half = rng.uniform(size_range[0], size_range[1], size=3) / 2.0
        removed |= segment_intersects_box(starts, pts, center - half, center + half)
    return PointCloud(pts[~removed], cloud.origin)
