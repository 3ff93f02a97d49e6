"""Flat ``key = value`` config files with strict schemas.

Each CLI surface declares the keys it understands; unknown keys are
rejected with the offending name so typos never pass silently.  '#' starts
a comment, blank lines are ignored.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .slam.engine import SlamConfig
from .synth import SynthWorldConfig
from .training.curriculum import CurriculumSchedule
from .training.losses import LossWeights
from .training.trainer import TrainConfig


class ConfigError(ValueError):
    pass


def load_kv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _check_unknown(kv: dict[str, str], known: set[str], path):
    unknown = sorted(set(kv) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; known keys: {sorted(known)}")


def _get(kv, key, cast, default):
    if key not in kv:
        return default
    raw = kv[key]
    try:
        if cast is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return cast(raw)
    except ValueError as e:
        raise ConfigError(f"key {key!r}: {e}") from None


def _tuple_of(cast):
    def parse(raw: str):
        return tuple(cast(x) for x in raw.replace(",", " ").split())

    return parse


SYNTH_KEYS = {
    "extent", "n_boxes", "n_planes", "n_poles", "trajectory", "n_scans",
    "n_agents", "lidar_range", "azimuth_steps", "elevation_angles",
    "noise_sigma", "sensor_height", "seed",
}


def synth_config_from_file(path: str | Path) -> SynthWorldConfig:
    kv = load_kv(path)
    _check_unknown(kv, SYNTH_KEYS, path)
    base = SynthWorldConfig()
    return SynthWorldConfig(
        extent=_get(kv, "extent", float, base.extent),
        n_boxes=_get(kv, "n_boxes", int, base.n_boxes),
        n_planes=_get(kv, "n_planes", int, base.n_planes),
        n_poles=_get(kv, "n_poles", int, base.n_poles),
        trajectory=_get(kv, "trajectory", str, base.trajectory),
        n_scans=_get(kv, "n_scans", int, base.n_scans),
        n_agents=_get(kv, "n_agents", int, base.n_agents),
        lidar_range=_get(kv, "lidar_range", float, base.lidar_range),
        azimuth_steps=_get(kv, "azimuth_steps", int, base.azimuth_steps),
        elevation_angles=_get(kv, "elevation_angles", _tuple_of(float), base.elevation_angles),
        noise_sigma=_get(kv, "noise_sigma", float, base.noise_sigma),
        sensor_height=_get(kv, "sensor_height", float, base.sensor_height),
        seed=_get(kv, "seed", int, base.seed),
    )


MODEL_KEYS = {
    "m_keypoints", "feature_dim", "level1_radius", "level2_radius",
    "neighbors_per_group", "hidden",
    "transformer_layers", "heads", "model_dim", "top_k", "overlap_distance",
    "svd_weighting", "inlier_distance", "similarity_head_dim", "head_hidden",
}

TRAIN_KEYS = MODEL_KEYS | {
    "stage1_steps", "stage2_steps", "lr", "weight_decay", "stage2_decay",
    "sample_overlap_distance",
    "pairing_weight", "coarse_weight", "offset_weight", "temperature",
    "positive_radius", "offset_radius",
    "curriculum_max_scans", "curriculum_occlusion_prob",
}

SLAM_KEYS = MODEL_KEYS | {
    "keyframe_distance_min", "keyframe_distance_max", "keyframe_distance_init",
    "confidence_target", "adaptation_rate", "loop_radius",
    "loop_probability_threshold", "map_neighbors", "min_inlier_ratio",
    "max_rmse", "temporal_guard", "enable_loop_closure", "max_loop_attempts",
}


def _encoder_from_kv(kv) -> EncoderConfig:
    base = EncoderConfig()
    return EncoderConfig(
        m_keypoints=_get(kv, "m_keypoints", int, base.m_keypoints),
        feature_dim=_get(kv, "feature_dim", int, base.feature_dim),
        level1_radius=_get(kv, "level1_radius", float, base.level1_radius),
        level2_radius=_get(kv, "level2_radius", float, base.level2_radius),
        neighbors_per_group=_get(kv, "neighbors_per_group", int, base.neighbors_per_group),
        hidden=_get(kv, "hidden", _tuple_of(int), base.hidden),
    )


def _decoder_from_kv(kv, encoder: EncoderConfig) -> DecoderConfig:
    base = DecoderConfig()
    return DecoderConfig(
        transformer_layers=_get(kv, "transformer_layers", int, base.transformer_layers),
        heads=_get(kv, "heads", int, base.heads),
        model_dim=_get(kv, "model_dim", int, base.model_dim),
        top_k=_get(kv, "top_k", int, base.top_k),
        overlap_distance=_get(kv, "overlap_distance", float, base.overlap_distance),
        svd_weighting=_get(kv, "svd_weighting", str, base.svd_weighting),
        inlier_distance=_get(kv, "inlier_distance", float, base.inlier_distance),
        similarity_head_dim=_get(kv, "similarity_head_dim", int, base.similarity_head_dim),
        head_hidden=_get(kv, "head_hidden", int, base.head_hidden),
        input_dim=encoder.feature_dim,
    )


def model_configs_from_file(path: str | Path) -> tuple[EncoderConfig, DecoderConfig]:
    kv = load_kv(path)
    _check_unknown(kv, MODEL_KEYS, path)
    enc = _encoder_from_kv(kv)
    return enc, _decoder_from_kv(kv, enc)


def train_config_from_file(path: str | Path) -> TrainConfig:
    kv = load_kv(path)
    _check_unknown(kv, TRAIN_KEYS, path)
    enc = _encoder_from_kv(kv)
    dec = _decoder_from_kv(kv, enc)
    base_l = LossWeights()
    losses = LossWeights(
        pairing_weight=_get(kv, "pairing_weight", float, base_l.pairing_weight),
        coarse_weight=_get(kv, "coarse_weight", float, base_l.coarse_weight),
        offset_weight=_get(kv, "offset_weight", float, base_l.offset_weight),
        temperature=_get(kv, "temperature", float, base_l.temperature),
        positive_radius=_get(kv, "positive_radius", float, base_l.positive_radius),
        offset_radius=_get(kv, "offset_radius", float, base_l.offset_radius),
    )
    base_s = CurriculumSchedule()
    schedule = CurriculumSchedule(
        max_scans=_get(kv, "curriculum_max_scans", _tuple_of(int), base_s.max_scans),
        occlusion_prob=_get(
            kv, "curriculum_occlusion_prob", _tuple_of(float), base_s.occlusion_prob
        ),
    )
    base_t = TrainConfig()
    return TrainConfig(
        encoder=enc,
        decoder=dec,
        loss_weights=losses,
        schedule=schedule,
        stage1_steps=_get(kv, "stage1_steps", int, base_t.stage1_steps),
        stage2_steps=_get(kv, "stage2_steps", int, base_t.stage2_steps),
        lr=_get(kv, "lr", float, base_t.lr),
        weight_decay=_get(kv, "weight_decay", float, base_t.weight_decay),
        stage2_decay=_get(kv, "stage2_decay", float, base_t.stage2_decay),
        sample_overlap_distance=_get(
            kv, "sample_overlap_distance", float, base_t.sample_overlap_distance
        ),
    )


def slam_configs_from_file(
    path: str | Path | None,
) -> tuple[EncoderConfig, DecoderConfig, SlamConfig]:
    if path is None:
        enc = EncoderConfig()
        return enc, replace(DecoderConfig(), input_dim=enc.feature_dim), SlamConfig()
    kv = load_kv(path)
    _check_unknown(kv, SLAM_KEYS, path)
    enc = _encoder_from_kv(kv)
    dec = _decoder_from_kv(kv, enc)
    base = SlamConfig()
    slam = SlamConfig(
        keyframe_distance_min=_get(kv, "keyframe_distance_min", float, base.keyframe_distance_min),
        keyframe_distance_max=_get(kv, "keyframe_distance_max", float, base.keyframe_distance_max),
        keyframe_distance_init=_get(
            kv, "keyframe_distance_init", float, base.keyframe_distance_init
        ),
        confidence_target=_get(kv, "confidence_target", float, base.confidence_target),
        adaptation_rate=_get(kv, "adaptation_rate", float, base.adaptation_rate),
        loop_radius=_get(kv, "loop_radius", float, base.loop_radius),
        loop_probability_threshold=_get(
            kv, "loop_probability_threshold", float, base.loop_probability_threshold
        ),
        map_neighbors=_get(kv, "map_neighbors", int, base.map_neighbors),
        min_inlier_ratio=_get(kv, "min_inlier_ratio", float, base.min_inlier_ratio),
        max_rmse=_get(kv, "max_rmse", float, base.max_rmse),
        temporal_guard=_get(kv, "temporal_guard", int, base.temporal_guard),
        enable_loop_closure=_get(kv, "enable_loop_closure", bool, base.enable_loop_closure),
        max_loop_attempts=_get(kv, "max_loop_attempts", int, base.max_loop_attempts),
    )
    return enc, dec, slam
