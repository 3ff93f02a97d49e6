"""Descriptor extraction: dense scan in, sparse descriptor cloud out.

A two-level sample/group/pool network.  Level 1 picks 4*M centers by
farthest-point sampling, gathers capped radius neighborhoods, runs a shared
MLP over relative coordinates and max-pools per group.  Level 2 repeats the
scheme over the level-1 centers and their pooled features, ending at M
descriptors of dimension C.

Features see relative coordinates only, so they are invariant to global
translation of the input; descriptor positions translate along with it.
Per-group max pooling makes features independent of input point order (the
cloud is canonicalized by sorting before sampling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .geometry import (
    DescriptorCloud,
    GeometryError,
    PointCloud,
    deduplicate_points,
    farthest_point_sample,
    radius_neighbors,
)


class TooFewPointsError(GeometryError):
    """Scan has fewer usable points than requested keypoints."""


@dataclass(frozen=True)
class EncoderConfig:
    m_keypoints: int = 256
    feature_dim: int = 64
    level1_radius: float = 1.0
    level2_radius: float = 4.0
    neighbors_per_group: int = 16
    hidden: tuple[int, ...] = (32, 64)
    dedup_distance: float = 0.01
    level1_factor: int = 4  # level 1 samples level1_factor * m_keypoints centers

    def __post_init__(self):
        if self.m_keypoints < 8:
            raise ValueError(f"m_keypoints must be >= 8, got {self.m_keypoints}")
        if self.feature_dim < 8:
            raise ValueError(f"feature_dim must be >= 8, got {self.feature_dim}")
        if not self.level2_radius > self.level1_radius:
            raise ValueError(
                f"radii must be strictly increasing, got {self.level1_radius}, {self.level2_radius}"
            )

    @property
    def level1_mlp_dims(self) -> tuple[int, ...]:
        # input per neighbor: relative xyz + distance
        return (4, self.hidden[0], self.hidden[0])

    @property
    def level2_mlp_dims(self) -> tuple[int, ...]:
        return (self.hidden[0] + 4, self.hidden[1], self.feature_dim)


def add_encoder_params(store: nn.ParameterStore, cfg: EncoderConfig):
    store.add_mlp("encoder.level1", cfg.level1_mlp_dims)
    store.add_mlp("encoder.level2", cfg.level2_mlp_dims)


def _group_matrix(
    centers: np.ndarray,
    center_indices: np.ndarray,
    positions: np.ndarray,
    radius: float,
    cap: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Relative-coordinate rows for all groups, plus member indices and lengths.

    ``center_indices[ci]`` is the index of center ``ci`` within ``positions``;
    an empty neighborhood degenerates to the center alone.
    """
    groups = radius_neighbors(centers, positions, radius, cap)
    lengths = np.array([max(len(g), 1) for g in groups], dtype=np.int64)
    rows = []
    members = []
    for ci, g in enumerate(groups):
        if len(g) == 0:
            g = np.array([int(center_indices[ci])], dtype=np.int64)
        rel = positions[g] - centers[ci]
        dist = np.linalg.norm(rel, axis=1, keepdims=True)
        rows.append(np.hstack([rel, dist]))
        members.append(g)
    return np.vstack(rows), np.concatenate(members), lengths


def encode_on_tape(
    tape: Tape,
    store: nn.ParameterStore,
    cloud: PointCloud,
    cfg: EncoderConfig,
    seed: int = 0,
) -> tuple[np.ndarray, Tensor]:
    """Forward pass producing (positions (M,3), features Tensor (M,C)).

    Positions are plain geometry (selected input points); only features ride
    the tape.  Used directly by training; :func:`encode` wraps it for
    inference.
    """
    pts = cloud.points
    if len(pts) == 0:
        raise TooFewPointsError("empty scan")
    # canonical order: behavior becomes independent of input permutation
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    pts = pts[order]
    keep = deduplicate_points(pts, cfg.dedup_distance)
    pts = pts[keep]
    if pts.shape[0] < cfg.m_keypoints:
        raise TooFewPointsError(
            f"{pts.shape[0]} points after deduplication, need >= {cfg.m_keypoints}"
        )

    base = PointCloud(pts, cloud.origin)
    m1 = min(cfg.level1_factor * cfg.m_keypoints, pts.shape[0])
    idx1 = farthest_point_sample(base, m1, seed)
    centers1 = pts[idx1]

    rows1, _, lengths1 = _group_matrix(
        centers1, idx1, pts, cfg.level1_radius, cfg.neighbors_per_group
    )
    h1 = nn.mlp_forward(tape, store, "encoder.level1", tape.constant(rows1), cfg.level1_mlp_dims)
    feat1 = ad.segment_max(h1, lengths1)  # (m1, hidden[0])

    c1_cloud = PointCloud(centers1, cloud.origin)
    idx2 = farthest_point_sample(c1_cloud, min(cfg.m_keypoints, centers1.shape[0]), seed)
    centers2 = centers1[idx2]

    rows_geo, members2, lengths2 = _group_matrix(
        centers2, idx2, centers1, cfg.level2_radius, cfg.neighbors_per_group
    )
    geo = tape.constant(rows_geo)
    neigh_feats = ad.gather_rows(feat1, members2)
    h2_in = ad.concat(geo, neigh_feats)
    h2 = nn.mlp_forward(tape, store, "encoder.level2", h2_in, cfg.level2_mlp_dims)
    feats = ad.segment_max(h2, lengths2)  # (M, C)
    return centers2, feats


def encode(
    cloud: PointCloud,
    cfg: EncoderConfig,
    store: nn.ParameterStore,
    seed: int = 0,
    frame_tag: str = "local",
) -> DescriptorCloud:
    """Extract a descriptor cloud from a scan (no gradients recorded)."""
    tape = Tape(grad_enabled=False)
    positions, feats = encode_on_tape(tape, store, cloud, cfg, seed)
    return DescriptorCloud(positions, feats.data, origin=cloud.origin, frame_tag=frame_tag)
