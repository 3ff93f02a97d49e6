from .labels import PairLabels, gt_offsets, label_pairs
from .losses import (
    LossWeights,
    NoPositivePairsError,
    coarse_pairing_loss,
    offset_loss,
    overall_loss,
    overlap_loss,
    pairing_loss,
)
from .occlusion import random_occlusion
from .curriculum import CurriculumSchedule, ExhaustedRetryError, curriculum_sample
from .optimizer import AdamW, cosine_lr
from .trainer import TrainConfig, train

__all__ = [
    "AdamW",
    "CurriculumSchedule",
    "ExhaustedRetryError",
    "LossWeights",
    "NoPositivePairsError",
    "PairLabels",
    "TrainConfig",
    "coarse_pairing_loss",
    "cosine_lr",
    "curriculum_sample",
    "gt_offsets",
    "label_pairs",
    "offset_loss",
    "overall_loss",
    "overlap_loss",
    "pairing_loss",
    "random_occlusion",
    "train",
]
