"""Multi-scale sample drawing for training.

The schedule grows the number of scans merged per sample across training
phases, so the model graduates from scan-to-scan to map-level registration.
Samples are pairs of (possibly merged) descriptor clouds with an exact
relative ground-truth transform and guaranteed spatial overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import Sequence
from ..encoder import EncoderConfig, encode
from ..geometry import DescriptorCloud, Pose, PointCloud, merge_descriptor_clouds, se3_compose, se3_inverse
from .occlusion import random_occlusion


class ExhaustedRetryError(RuntimeError):
    """No overlapping sample pair found within the retry budget."""


@dataclass(frozen=True)
class CurriculumSchedule:
    """Per-phase cap on merged scans and probability of occlusion augmentation."""

    max_scans: tuple[int, ...] = (1, 2, 4, 8)
    occlusion_prob: tuple[float, ...] = (0.0, 0.2, 0.35, 0.5)

    def __post_init__(self):
        if len(self.max_scans) != len(self.occlusion_prob):
            raise ValueError("schedule phase lists must have equal length")
        if any(b < a for a, b in zip(self.max_scans, self.max_scans[1:])):
            raise ValueError(f"map scale must be non-decreasing, got {self.max_scans}")

    def at(self, epoch: int) -> tuple[int, float]:
        i = min(max(epoch, 0), len(self.max_scans) - 1)
        return self.max_scans[i], self.occlusion_prob[i]


@dataclass(frozen=True)
class SamplePlan:
    """Scan indices and frames for one training pair, before any encoding.

    Each group is expressed in the frame of its first scan; ``relative_poses``
    map each member scan into that reference frame.  ``t_gt`` maps group A's
    reference frame into group B's.
    """

    scans_a: tuple[int, ...]
    scans_b: tuple[int, ...]
    rel_poses_a: tuple[Pose, ...]
    rel_poses_b: tuple[Pose, ...]
    t_gt: Pose
    occlude_a: bool
    occlude_b: bool
    occlusion_seed: int


def _group(dataset: Sequence, anchor: int, n_scans: int) -> tuple[tuple[int, ...], tuple[Pose, ...]]:
    hi = min(anchor + n_scans, len(dataset))
    idx = tuple(range(anchor, hi))
    ref_inv = se3_inverse(dataset.gt_poses[anchor])
    rel = tuple(se3_compose(ref_inv, dataset.gt_poses[i]) for i in idx)
    return idx, rel


def draw_sample_plan(
    dataset: Sequence,
    epoch: int,
    schedule: CurriculumSchedule,
    rng: np.random.Generator,
    overlap_distance: float = 20.0,
    max_retries: int = 100,
) -> SamplePlan:
    if dataset.gt_poses is None:
        raise ValueError("curriculum sampling needs ground-truth poses")
    max_scans, occl_prob = schedule.at(epoch)
    n = len(dataset)
    positions = np.array([p.translation for p in dataset.gt_poses])
    for _ in range(max_retries):
        scale_a = int(rng.integers(1, max_scans + 1))
        scale_b = int(rng.integers(1, max_scans + 1))
        a = int(rng.integers(0, n))
        # anchors whose sensor origins overlap
        close = np.flatnonzero(
            np.linalg.norm(positions - positions[a], axis=1) < overlap_distance
        )
        if close.size == 0:
            continue
        b = int(rng.choice(close))
        idx_a, rel_a = _group(dataset, a, scale_a)
        idx_b, rel_b = _group(dataset, b, scale_b)
        t_gt = se3_compose(se3_inverse(dataset.gt_poses[b]), dataset.gt_poses[a])
        return SamplePlan(
            scans_a=idx_a,
            scans_b=idx_b,
            rel_poses_a=rel_a,
            rel_poses_b=rel_b,
            t_gt=t_gt,
            occlude_a=bool(rng.uniform() < occl_prob),
            occlude_b=bool(rng.uniform() < occl_prob),
            occlusion_seed=int(rng.integers(0, 2**31 - 1)),
        )
    raise ExhaustedRetryError(
        f"no overlapping sample found in {max_retries} draws (epoch {epoch})"
    )


def prepare_scan(
    dataset: Sequence,
    index: int,
    occlude: bool,
    occlusion_seed: int,
    min_points: int,
    n_boxes: int = 3,
    size_range: tuple[float, float] = (1.0, 4.0),
) -> PointCloud:
    """Fetch a scan, optionally occluded; falls back to the clean scan if the
    augmentation removes too much."""
    scan = dataset.scans[index]
    if occlude:
        occluded = random_occlusion(scan, n_boxes, size_range, occlusion_seed + index)
        if len(occluded) >= min_points:
            return occluded
    return scan


def curriculum_sample(
    dataset: Sequence,
    epoch: int,
    schedule: CurriculumSchedule,
    seed: int,
    store,
    enc_cfg: EncoderConfig,
    overlap_distance: float = 20.0,
) -> tuple[DescriptorCloud, DescriptorCloud, Pose]:
    """Draw one training pair as merged descriptor clouds plus ground truth.

    Scans are encoded individually and merged at descriptor level (features
    are never re-extracted when merging).
    """
    rng = np.random.default_rng(seed)
    plan = draw_sample_plan(dataset, epoch, schedule, rng, overlap_distance)
    min_pts = enc_cfg.m_keypoints * 2

    def build(indices, rel_poses, occlude):
        clouds = []
        for i in indices:
            scan = prepare_scan(dataset, i, occlude, plan.occlusion_seed, min_pts)
            clouds.append(encode(scan, enc_cfg, store, seed=i, frame_tag=f"scan{i}"))
        return merge_descriptor_clouds(clouds, list(rel_poses), frame_tag="sample")

    cloud_a = build(plan.scans_a, plan.rel_poses_a, plan.occlude_a)
    cloud_b = build(plan.scans_b, plan.rel_poses_b, plan.occlude_b)
    return cloud_a, cloud_b, plan.t_gt
