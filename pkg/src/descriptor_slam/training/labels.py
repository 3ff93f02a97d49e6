"""Ground-truth pair labeling between two descriptor clouds.

For each anchor in the first cloud, its nearest descriptor in the second
(measured in the common frame) is a positive pair when within the distance
threshold; other descriptors inside the threshold are neutral (ignored by
contrastive losses); everything else is negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import DescriptorCloud, Pose, transform_points


@dataclass(frozen=True)
class PairLabels:
    """Per-anchor masks over the other cloud; a disjoint partition."""

    positive: np.ndarray  # (Mp, Mq) bool
    neutral: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        overlap = (
            self.positive.astype(int) + self.neutral.astype(int) + self.negative.astype(int)
        )
        if not (overlap == 1).all():
            raise ValueError("pair label masks must partition the candidate set")

    @property
    def anchors_with_positive(self) -> np.ndarray:
        return np.flatnonzero(self.positive.any(axis=1))

    def pairs(self, include_neutral: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """(anchor, other) index arrays of positive (and optionally neutral) pairs."""
        mask = self.positive | self.neutral if include_neutral else self.positive
        return np.nonzero(mask)


def label_pairs(
    p: DescriptorCloud,
    q: DescriptorCloud,
    t_gt: Pose,
    positive_radius: float,
) -> PairLabels:
    """Label every (p_i, q_j) pair; ``t_gt`` maps p's frame into q's frame.

    Ties on the nearest-neighbor distance break toward the lower q index.
    """
    p_in_q = transform_points(t_gt, p.positions)
    diff = p_in_q[:, None, :] - q.positions[None, :, :]
    dist = np.linalg.norm(diff, axis=2)  # (Mp, Mq)
    nearest = dist.argmin(axis=1)  # argmin takes the lowest index on ties
    mp, mq = dist.shape
    positive = np.zeros((mp, mq), dtype=bool)
    rows = np.arange(mp)
    within = dist[rows, nearest] <= positive_radius
    positive[rows[within], nearest[within]] = True
    neutral = (dist <= positive_radius) & ~positive
    negative = ~positive & ~neutral
    return PairLabels(positive, neutral, negative)


def gt_offsets(
    positions_p: np.ndarray,
    positions_q: np.ndarray,
    index_p: np.ndarray,
    index_q: np.ndarray,
    t_gt: Pose,
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth directional offsets for descriptor pairs.

    Derived so the true transform zeroes the aligned residual: the forward
    offset lives in p's frame (added to p before transforming), the backward
    offset in q's frame (added to q).
    """
    p = positions_p[np.asarray(index_p, dtype=np.int64)]
    q = positions_q[np.asarray(index_q, dtype=np.int64)]
    r, t = t_gt.rotation, t_gt.translation
    fwd = (q - t) @ r - p  # inverse-transform q into p's frame
    bwd = p @ r.T + t - q
    return fwd, bwd
