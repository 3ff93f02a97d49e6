"""The four training losses and their weighted combination.

Contrastive pairing losses run per anchor over a similarity matrix: the
fine-grained variant normalizes against every candidate, the coarse variant
(on raw encoder features) drops neutral pairs from the denominator.  The
offset loss penalizes the distance between predicted and ground-truth pair
offsets; the overlap loss is plain binary cross-entropy and is trained in
its own stage, never mixed into the combined loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, Tensor
from .labels import PairLabels


class NoPositivePairsError(RuntimeError):
    """No anchor has a positive pair; the caller should resample the batch."""


@dataclass(frozen=True)
class LossWeights:
    pairing_weight: float = 1.0
    coarse_weight: float = 0.1
    offset_weight: float = 1.0
    temperature: float = 0.1
    positive_radius: float = 1.0  # meters
    offset_radius: float = 2.0  # meters

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.offset_radius < self.positive_radius:
            raise ValueError(
                f"offset_radius {self.offset_radius} must be >= "
                f"positive_radius {self.positive_radius}"
            )


def _contrastive(
    sim: Tensor, labels: PairLabels, temperature: float, exclude_neutral: bool
) -> Tensor:
    anchors = labels.anchors_with_positive
    if anchors.size == 0:
        raise NoPositivePairsError("no anchor has a positive pair")
    tape = sim.tape
    scaled = ad.scale(sim, 1.0 / temperature)
    # constant max-shift for stability; exact because logsumexp is shift-invariant
    shift = float(scaled.data.max())
    e = ad.exp(ad.add_scalar(scaled, -shift))
    pos_mask = labels.positive.astype(np.float64)
    denom_mask = (
        (labels.positive | labels.negative).astype(np.float64)
        if exclude_neutral
        else np.ones_like(pos_mask)
    )
    num = ad.gather_rows(ad.row_sum(ad.mul(e, tape.constant(pos_mask))), anchors)
    den = ad.gather_rows(ad.row_sum(ad.mul(e, tape.constant(denom_mask))), anchors)
    per_anchor = ad.sub(ad.log(den), ad.log(num))
    return ad.mean_all(per_anchor)


def pairing_loss(sim: Tensor, labels: PairLabels, temperature: float) -> Tensor:
    """Mean over anchors with positives of -log(sum_pos e / sum_all e)."""
    return _contrastive(sim, labels, temperature, exclude_neutral=False)


def coarse_pairing_loss(sim: Tensor, labels: PairLabels, temperature: float) -> Tensor:
    """As :func:`pairing_loss`, with neutral pairs left out of the denominator."""
    return _contrastive(sim, labels, temperature, exclude_neutral=True)


def offset_loss(
    predicted: Tensor,
    target: np.ndarray,
    anchor_index: np.ndarray,
    n_anchors: int,
) -> Tensor:
    """Mean over anchors of the mean pair offset error (identity covariance).

    ``predicted`` is (K, 3) on the tape, ``target`` the ground-truth offsets,
    ``anchor_index[k]`` the anchor each pair belongs to.  Anchors without any
    pair contribute zero; the outer mean still counts them.
    """
    tape = predicted.tape
    if predicted.data.shape[0] == 0:
        return tape.constant(0.0)
    anchor_index = np.asarray(anchor_index, dtype=np.int64)
    diff = ad.sub(predicted, tape.constant(np.asarray(target, dtype=np.float64)))
    norms = ad.sqrt(ad.row_sum(ad.square(diff)))  # (K,)
    counts = np.bincount(anchor_index, minlength=n_anchors).astype(np.float64)
    pair_w = 1.0 / (counts[anchor_index] * n_anchors)
    return ad.sum_all(ad.mul(norms, tape.constant(pair_w)))


def overlap_loss(prob: Tensor, label: int) -> Tensor:
    """Binary cross-entropy on a scalar probability, clamped away from 0/1."""
    p = ad.clip(prob, 1e-7, 1.0 - 1e-7)
    if label not in (0, 1):
        raise ValueError(f"overlap label must be 0 or 1, got {label}")
    if label == 1:
        return ad.scale(ad.log(p), -1.0)
    return ad.scale(ad.log(ad.add_scalar(ad.scale(p, -1.0), 1.0)), -1.0)


def overall_loss(
    directional_components: list[tuple[Tensor, Tensor, Tensor]],
    weights: LossWeights,
) -> Tensor:
    """Direction-averaged weighted sum of (pairing, coarse, offset) losses.

    The overlap loss is deliberately absent: it trains in its own stage.
    """
    if not directional_components:
        raise ValueError("need at least one direction")
    total = None
    for loss_p, loss_c, loss_o in directional_components:
        for part in (loss_p, loss_c, loss_o):
            if not np.isfinite(part.data):
                raise FloatingPointError(
                    f"non-finite loss component: p={loss_p.data} c={loss_c.data} o={loss_o.data}"
                )
        term = ad.add(
            ad.add(
                ad.scale(loss_p, weights.pairing_weight),
                ad.scale(loss_c, weights.coarse_weight),
            ),
            ad.scale(loss_o, weights.offset_weight),
        )
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(directional_components))
