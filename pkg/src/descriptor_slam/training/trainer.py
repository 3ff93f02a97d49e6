"""Two-stage training loop.

Stage 1 jointly trains the encoder and the registration decoder end-to-end
with the combined pairing/coarse/offset loss, averaged over both pair
directions, under the multi-scale curriculum.  Stage 2 freezes everything
except the overlap head and trains it with binary cross-entropy on scan
pairs drawn with equal probability of overlapping and disjoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape
from ..dataset import Sequence
from ..decoder import (
    DecoderConfig,
    add_decoder_params,
    correlate_on_tape,
    overlap_head_param_names,
    predict_offsets_on_tape,
    predict_overlap_on_tape,
    similarity_matrix_on_tape,
)
from ..encoder import EncoderConfig, add_encoder_params, encode_on_tape
from ..geometry import Pose, se3_inverse, transform_points
from ..nn import ParameterStore
from .curriculum import CurriculumSchedule, draw_sample_plan, prepare_scan
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
from .optimizer import AdamW, cosine_lr


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    stage1_steps: int = 800
    stage2_steps: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-4
    stage2_decay: float = 0.1  # lr and wd shrink for the overlap stage
    sample_overlap_distance: float = 15.0  # meters between drawn sample origins
    resample_attempts: int = 20

    def __post_init__(self):
        if self.decoder.input_dim != self.encoder.feature_dim:
            raise ValueError(
                f"decoder input_dim {self.decoder.input_dim} must equal "
                f"encoder feature_dim {self.encoder.feature_dim}"
            )


def init_params(config: TrainConfig, seed: int) -> ParameterStore:
    store = ParameterStore(rng_seed=seed)
    add_encoder_params(store, config.encoder)
    add_decoder_params(store, config.decoder)
    return store


def _encode_group(tape, store, dataset, plan, indices, rel_poses, occlude, cfg: TrainConfig):
    """Encode and merge one scan group on the tape.

    Positions are merged as plain geometry; features stay differentiable.
    """
    min_pts = cfg.encoder.m_keypoints * 2
    positions = []
    feats = None
    for i, rel in zip(indices, rel_poses):
        scan = prepare_scan(dataset, i, occlude, plan.occlusion_seed, min_pts)
        pos, f = encode_on_tape(tape, store, scan, cfg.encoder, seed=i)
        positions.append(transform_points(rel, pos))
        feats = f if feats is None else ad.concat_rows(feats, f)
    return np.vstack(positions), feats


def _directional_losses(
    tape,
    store,
    dec_cfg: DecoderConfig,
    lw: LossWeights,
    pos_a: np.ndarray,
    corr_a,
    pos_b: np.ndarray,
    corr_b,
    fine_sim,
    coarse_sim,
    t_ab: Pose,
):
    """(pairing, coarse, offset) for the A -> B direction."""
    labels = label_pairs_arrays(pos_a, pos_b, t_ab, lw.positive_radius)
    loss_p = pairing_loss(fine_sim, labels, lw.temperature)
    loss_c = coarse_pairing_loss(coarse_sim, labels, lw.temperature)

    offset_labels = label_pairs_arrays(pos_a, pos_b, t_ab, lw.offset_radius)
    idx_a, idx_b = offset_labels.pairs(include_neutral=True)
    if idx_a.size:
        pred_fwd, _ = predict_offsets_on_tape(
            tape, store, corr_a, corr_b, idx_a, idx_b, dec_cfg
        )
        target_fwd, _ = gt_offsets(pos_a, pos_b, idx_a, idx_b, t_ab)
        loss_o = offset_loss(pred_fwd, target_fwd, idx_a, pos_a.shape[0])
    else:
        loss_o = tape.constant(0.0)
    return loss_p, loss_c, loss_o


def label_pairs_arrays(pos_a, pos_b, t_ab: Pose, radius: float) -> PairLabels:
    """label_pairs over raw position arrays (no cloud wrappers needed)."""
    a_in_b = transform_points(t_ab, pos_a)
    dist = np.linalg.norm(a_in_b[:, None, :] - pos_b[None, :, :], axis=2)
    nearest = dist.argmin(axis=1)
    mp, mq = dist.shape
    positive = np.zeros((mp, mq), dtype=bool)
    rows = np.arange(mp)
    within = dist[rows, nearest] <= radius
    positive[rows[within], nearest[within]] = True
    neutral = (dist <= radius) & ~positive
    return PairLabels(positive, neutral, ~positive & ~neutral)


def _coarse_similarity(tape, raw_a, raw_b):
    na = ad.row_l2_normalize(raw_a)
    nb = ad.row_l2_normalize(raw_b)
    return ad.matmul(na, ad.transpose(nb))


def pair_losses_on_tape(
    tape: Tape,
    store: ParameterStore,
    pos_a: np.ndarray,
    raw_a,
    pos_b: np.ndarray,
    raw_b,
    t_gt: Pose,
    dec_cfg: DecoderConfig,
    weights: LossWeights,
):
    """Direction-resolved (pairing, coarse, offset) loss tuples for one pair."""
    corr_a, corr_b = correlate_on_tape(tape, store, pos_a, raw_a, pos_b, raw_b, dec_cfg)
    fine_ab = similarity_matrix_on_tape(tape, store, corr_a, corr_b, dec_cfg)
    coarse_ab = _coarse_similarity(tape, raw_a, raw_b)
    fwd = _directional_losses(
        tape, store, dec_cfg, weights, pos_a, corr_a, pos_b, corr_b,
        fine_ab, coarse_ab, t_gt,
    )
    bwd = _directional_losses(
        tape, store, dec_cfg, weights, pos_b, corr_b, pos_a, corr_a,
        ad.transpose(fine_ab), ad.transpose(coarse_ab), se3_inverse(t_gt),
    )
    return fwd, bwd


def toy_pair_loss(
    tape: Tape,
    store: ParameterStore,
    pos_a: np.ndarray,
    feats_a: np.ndarray,
    pos_b: np.ndarray,
    feats_b: np.ndarray,
    t_gt: Pose,
    dec_cfg: DecoderConfig,
    weights: LossWeights,
):
    """Combined loss on a bare descriptor pair (no encoder), for gradient checks."""
    fwd, bwd = pair_losses_on_tape(
        tape, store, pos_a, tape.constant(feats_a), pos_b, tape.constant(feats_b),
        t_gt, dec_cfg, weights,
    )
    return overall_loss([fwd, bwd], weights)


def stage1_step(
    tape: Tape,
    store: ParameterStore,
    dataset: Sequence,
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
):
    """One stage-1 forward: returns (total, loss_p, loss_c, loss_o) tensors."""
    plan = draw_sample_plan(
        dataset, epoch, cfg.schedule, rng, overlap_distance=cfg.sample_overlap_distance
    )
    pos_a, raw_a = _encode_group(
        tape, store, dataset, plan, plan.scans_a, plan.rel_poses_a, plan.occlude_a, cfg
    )
    pos_b, raw_b = _encode_group(
        tape, store, dataset, plan, plan.scans_b, plan.rel_poses_b, plan.occlude_b, cfg
    )
    fwd, bwd = pair_losses_on_tape(
        tape, store, pos_a, raw_a, pos_b, raw_b, plan.t_gt, cfg.decoder, cfg.loss_weights
    )
    total = overall_loss([fwd, bwd], cfg.loss_weights)
    mean3 = lambda i: 0.5 * (float(fwd[i].data) + float(bwd[i].data))
    return total, mean3(0), mean3(1), mean3(2)


def _draw_overlap_pair(dataset: Sequence, rng, overlap_distance: float, max_retries=200):
    positions = np.array([p.translation for p in dataset.gt_poses])
    n = len(dataset)
    want_positive = bool(rng.uniform() < 0.5)
    for _ in range(max_retries):
        a = int(rng.integers(0, n))
        d = np.linalg.norm(positions - positions[a], axis=1)
        pool = np.flatnonzero((d < overlap_distance) if want_positive else (d >= overlap_distance))
        pool = pool[pool != a]
        if pool.size:
            return a, int(rng.choice(pool)), int(want_positive)
        want_positive = not want_positive  # degenerate worlds: flip and retry
    raise NoPositivePairsError("could not draw an overlap training pair")


def stage2_step(
    tape: Tape,
    store: ParameterStore,
    dataset: Sequence,
    cfg: TrainConfig,
    rng: np.random.Generator,
):
    a, b, label = _draw_overlap_pair(dataset, rng, cfg.decoder.overlap_distance)
    pos_a, raw_a = encode_on_tape(tape, store, dataset.scans[a], cfg.encoder, seed=a)
    pos_b, raw_b = encode_on_tape(tape, store, dataset.scans[b], cfg.encoder, seed=b)
    corr_a, corr_b = correlate_on_tape(tape, store, pos_a, raw_a, pos_b, raw_b, cfg.decoder)
    prob = predict_overlap_on_tape(tape, store, corr_a, corr_b, cfg.decoder)
    return overlap_loss(prob, label), label, float(prob.data)


def train(
    dataset: Sequence,
    config: TrainConfig,
    seed: int,
    log_path: str | Path | None = None,
    log_every: int = 1,
) -> ParameterStore:
    """Run both stages; returns the trained parameters.

    Fully deterministic for a fixed seed: sampling uses per-step derived
    seeds, so the schedule of draws does not depend on retry behavior.
    """
    store = init_params(config, seed)
    log_file = open(log_path, "w") if log_path else None

    def emit(record: dict):
        if log_file:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        opt = AdamW(store, lr=config.lr, weight_decay=config.weight_decay)
        n_phases = len(config.schedule.max_scans)
        steps_per_phase = max(config.stage1_steps // n_phases, 1)
        for step in range(config.stage1_steps):
            epoch = min(step // steps_per_phase, n_phases - 1)
            result = None
            for attempt in range(config.resample_attempts):
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=(seed, 1, step, attempt))
                )
                tape = Tape()
                try:
                    result = stage1_step(tape, store, dataset, config, epoch, rng)
                    break
                except NoPositivePairsError:
                    continue
            if result is None:
                raise NoPositivePairsError(
                    f"step {step}: no positive pairs after {config.resample_attempts} draws"
                )
            total, loss_p, loss_c, loss_o = result
            if not np.isfinite(total.data):
                raise FloatingPointError(f"step {step}: non-finite loss {total.data}")
            grads = ad.backward(tape, total, store)
            lr = cosine_lr(config.lr, step, config.stage1_steps)
            opt.step(grads, lr=lr)
            if step % log_every == 0:
                emit(
                    {
                        "step": step, "stage": 1,
                        "loss_p": loss_p, "loss_c": loss_c, "loss_o": loss_o,
                        "loss_total": float(total.data), "lr": lr,
                    }
                )

        overlap_names = overlap_head_param_names(store)
        opt2 = AdamW(
            store,
            lr=config.lr * config.stage2_decay,
            weight_decay=config.weight_decay * config.stage2_decay,
            trainable=overlap_names,
        )
        for step in range(config.stage2_steps):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 2, step)))
            tape = Tape()
            loss, label, prob = stage2_step(tape, store, dataset, config, rng)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"stage-2 step {step}: non-finite loss")
            grads = ad.backward(tape, loss, store)
            lr = cosine_lr(config.lr * config.stage2_decay, step, config.stage2_steps)
            opt2.step(grads, lr=lr)
            if step % log_every == 0:
                emit(
                    {
                        "step": step, "stage": 2,
                        "loss_p": 0.0, "loss_c": 0.0, "loss_o": float(loss.data),
                        "loss_total": float(loss.data), "lr": lr,
                        "label": label, "prob": prob,
                    }
                )
    finally:
        if log_file:
            log_file.close()
    return store
