"""Registration decoder: correlate two descriptor clouds and solve their pose.

Pipeline: a weight-shared transformer block mixes features within and across
the pair (positions pass through untouched), a similarity head scores all
descriptor pairs by cosine, the top-k pairs get directional positional
offsets from the offset head, and a weighted closed-form rigid solve
(Kabsch with reflection fix) produces the transform.  A separate overlap
head turns the correlated pair into a single overlap probability used for
loop detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .geometry import Correspondence, DescriptorCloud, GeometryError, Pose


class DegenerateGeometryError(GeometryError):
    """Correspondences too degenerate (collinear/coincident) for a rigid solve."""


@dataclass(frozen=True)
class DecoderConfig:
    transformer_layers: int = 3
    heads: int = 4
    model_dim: int = 64  # feature width inside the transformer and heads
    top_k: int = 128
    overlap_distance: float = 20.0  # meters between sensor origins
    svd_weighting: str = "similarity"  # or "uniform"
    inlier_distance: float = 1.0  # residual threshold for inlier ratio / rmse
    similarity_head_dim: int = 32
    head_hidden: int = 64
    input_dim: int = 64  # encoder feature dim C

    def __post_init__(self):
        if self.top_k < 3:
            raise ValueError(f"top_k must be >= 3 for a rigid solve, got {self.top_k}")
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.svd_weighting not in ("similarity", "uniform"):
            raise ValueError(f"unknown svd_weighting {self.svd_weighting!r}")


@dataclass(frozen=True)
class CorrelatedCloud:
    """Transformer output: same positions, context-mixed features."""

    positions: np.ndarray
    features: np.ndarray


@dataclass(frozen=True)
class RegistrationResult:
    transform: Pose  # maps the first cloud's frame into the second's
    correspondences: list[Correspondence]
    offsets_fwd: np.ndarray
    offsets_bwd: np.ndarray
    confidence: float  # mean similarity of the selected pairs
    inlier_ratio: float
    rmse: float


def add_decoder_params(store: nn.ParameterStore, cfg: DecoderConfig):
    d = cfg.model_dim
    store.add_linear("decoder.input_proj", cfg.input_dim, d)
    store.add_linear("decoder.pos_lift", 3, d)
    store.add_layer_norm("decoder.norm_self", d)
    store.add_layer_norm("decoder.norm_cross_q", d)
    store.add_layer_norm("decoder.norm_cross_kv", d)
    store.add_layer_norm("decoder.norm_mlp", d)
    nn.add_attention_params(store, "decoder.self_attn", d)
    nn.add_attention_params(store, "decoder.cross_attn", d)
    store.add_mlp("decoder.mlp", (d, 2 * d, d))
    store.add_mlp("similarity_head", (d, cfg.head_hidden, cfg.similarity_head_dim))
    store.add_mlp("offset_head", (2 * d, cfg.head_hidden, cfg.head_hidden, 3))
    store.add_mlp("overlap_head.point", (d, cfg.head_hidden, cfg.head_hidden))
    store.add_mlp("overlap_head.global", (2 * cfg.head_hidden, cfg.head_hidden, 1))


def overlap_head_param_names(store: nn.ParameterStore) -> list[str]:
    return [n for n in store.names() if n.startswith("overlap_head.")]


# ----------------------------------------------------------------------
# transformer block
# ----------------------------------------------------------------------
def _entry_projection(tape, store, positions: np.ndarray, feats: Tensor, cfg) -> Tensor:
    proj = nn.linear_forward(tape, store, "decoder.input_proj", feats)
    lift = nn.linear_forward(tape, store, "decoder.pos_lift", tape.constant(positions))
    return ad.add(proj, lift)


def _transformer_layer(tape, store, x: Tensor, other: Tensor, cfg) -> Tensor:
    # pre-norm residual sublayers: self-attention, cross-attention, MLP
    h = ad.add(
        x,
        nn.multi_head_attention(
            tape, store, "decoder.self_attn",
            nn.layer_norm_forward(tape, store, "decoder.norm_self", x),
            nn.layer_norm_forward(tape, store, "decoder.norm_self", x),
            cfg.heads,
        ),
    )
    h = ad.add(
        h,
        nn.multi_head_attention(
            tape, store, "decoder.cross_attn",
            nn.layer_norm_forward(tape, store, "decoder.norm_cross_q", h),
            nn.layer_norm_forward(tape, store, "decoder.norm_cross_kv", other),
            cfg.heads,
        ),
    )
    h = ad.add(
        h,
        nn.mlp_forward(
            tape, store, "decoder.mlp",
            nn.layer_norm_forward(tape, store, "decoder.norm_mlp", h),
            (cfg.model_dim, 2 * cfg.model_dim, cfg.model_dim),
        ),
    )
    return h


def correlate_on_tape(
    tape: Tape,
    store: nn.ParameterStore,
    p_positions: np.ndarray,
    p_feats: Tensor,
    q_positions: np.ndarray,
    q_feats: Tensor,
    cfg: DecoderConfig,
) -> tuple[Tensor, Tensor]:
    """Run the weight-shared transformer stack over a cloud pair."""
    if p_feats.data.shape[1] != cfg.input_dim or q_feats.data.shape[1] != cfg.input_dim:
        raise ad.ShapeError(
            f"correlate: feature dims {p_feats.data.shape[1]}/{q_feats.data.shape[1]} "
            f"do not match configured input_dim {cfg.input_dim}"
        )
    hp = _entry_projection(tape, store, p_positions, p_feats, cfg)
    hq = _entry_projection(tape, store, q_positions, q_feats, cfg)
    for _ in range(cfg.transformer_layers):
        hp_next = _transformer_layer(tape, store, hp, hq, cfg)
        hq_next = _transformer_layer(tape, store, hq, hp, cfg)
        hp, hq = hp_next, hq_next
    return hp, hq


def correlate(
    p: DescriptorCloud,
    q: DescriptorCloud,
    store: nn.ParameterStore,
    cfg: DecoderConfig,
) -> tuple[CorrelatedCloud, CorrelatedCloud]:
    tape = Tape(grad_enabled=False)
    hp, hq = correlate_on_tape(
        tape, store, p.positions, tape.constant(p.features),
        q.positions, tape.constant(q.features), cfg,
    )
    return (
        CorrelatedCloud(p.positions, hp.data),
        CorrelatedCloud(q.positions, hq.data),
    )


# ----------------------------------------------------------------------
# heads
# ----------------------------------------------------------------------
def similarity_features(tape, store, feats: Tensor, cfg: DecoderConfig) -> Tensor:
    dims = (cfg.model_dim, cfg.head_hidden, cfg.similarity_head_dim)
    return nn.mlp_forward(tape, store, "similarity_head", feats, dims)


def similarity_matrix_on_tape(
    tape, store, p_feats: Tensor, q_feats: Tensor, cfg: DecoderConfig
) -> Tensor:
    """All-pairs cosine similarity of head-projected features: (Mp, Mq)."""
    hp = ad.row_l2_normalize(similarity_features(tape, store, p_feats, cfg))
    hq = ad.row_l2_normalize(similarity_features(tape, store, q_feats, cfg))
    return ad.matmul(hp, ad.transpose(hq))


def similarity_matrix(
    p_corr: CorrelatedCloud,
    q_corr: CorrelatedCloud,
    store: nn.ParameterStore,
    cfg: DecoderConfig,
) -> np.ndarray:
    tape = Tape(grad_enabled=False)
    s = similarity_matrix_on_tape(
        tape, store, tape.constant(p_corr.features), tape.constant(q_corr.features), cfg
    )
    return s.data


def top_k_correspondences(s: np.ndarray, k: int) -> list[Correspondence]:
    """Best-k cells of the similarity matrix, descending, ties by (row, col)."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise GeometryError("top_k over an empty similarity matrix")
    if k < 1:
        raise GeometryError(f"k must be >= 1, got {k}")
    mp, mq = s.shape
    flat = s.ravel()
    rows, cols = np.divmod(np.arange(flat.size), mq)
    order = np.lexsort((cols, rows, -flat))[: min(k, flat.size)]
    return [Correspondence(int(rows[i]), int(cols[i]), float(flat[i])) for i in order]


def predict_offsets_on_tape(
    tape,
    store,
    p_feats: Tensor,
    q_feats: Tensor,
    index_p: np.ndarray,
    index_q: np.ndarray,
    cfg: DecoderConfig,
) -> tuple[Tensor, Tensor]:
    """Directional per-pair offsets: forward from p+q features, backward from q+p."""
    dims = (2 * cfg.model_dim, cfg.head_hidden, cfg.head_hidden, 3)
    fp = ad.gather_rows(p_feats, index_p)
    fq = ad.gather_rows(q_feats, index_q)
    fwd = nn.mlp_forward(tape, store, "offset_head", ad.concat(fp, fq), dims)
    bwd = nn.mlp_forward(tape, store, "offset_head", ad.concat(fq, fp), dims)
    return fwd, bwd


def predict_offsets(
    p_corr: CorrelatedCloud,
    q_corr: CorrelatedCloud,
    pairs: list[Correspondence],
    store: nn.ParameterStore,
    cfg: DecoderConfig,
) -> tuple[np.ndarray, np.ndarray]:
    tape = Tape(grad_enabled=False)
    idx_p = np.array([c.index_p for c in pairs], dtype=np.int64)
    idx_q = np.array([c.index_q for c in pairs], dtype=np.int64)
    fwd, bwd = predict_offsets_on_tape(
        tape, store,
        tape.constant(p_corr.features), tape.constant(q_corr.features),
        idx_p, idx_q, cfg,
    )
    return fwd.data, bwd.data


def predict_overlap_on_tape(
    tape, store, p_feats: Tensor, q_feats: Tensor, cfg: DecoderConfig
) -> Tensor:
    """Scalar overlap probability in (0, 1)."""
    point_dims = (cfg.model_dim, cfg.head_hidden, cfg.head_hidden)
    gp = ad.mean_pool(nn.mlp_forward(tape, store, "overlap_head.point", p_feats, point_dims))
    gq = ad.mean_pool(nn.mlp_forward(tape, store, "overlap_head.point", q_feats, point_dims))
    both = _as_row(tape, ad.concat(gp, gq))
    logits = nn.mlp_forward(
        tape, store, "overlap_head.global", both, (2 * cfg.head_hidden, cfg.head_hidden, 1)
    )
    return ad.sigmoid(ad.mean_all(logits))


def _as_row(tape, v: Tensor) -> Tensor:
    # lift a 1-D vector to a 1xN matrix without leaving the tape
    n = v.data.shape[0]
    return tape._record(
        v.data.reshape(1, n), (v.node,), lambda g: (g.reshape(n),)
    )


def predict_overlap(
    p_corr: CorrelatedCloud,
    q_corr: CorrelatedCloud,
    store: nn.ParameterStore,
    cfg: DecoderConfig,
) -> float:
    tape = Tape(grad_enabled=False)
    prob = predict_overlap_on_tape(
        tape, store, tape.constant(p_corr.features), tape.constant(q_corr.features), cfg
    )
    return float(prob.data)


# ----------------------------------------------------------------------
# rigid solve
# ----------------------------------------------------------------------
def solve_transform(
    pairs: list[Correspondence],
    offsets_fwd: np.ndarray,
    offsets_bwd: np.ndarray,
    positions_p: np.ndarray,
    positions_q: np.ndarray,
    weights: np.ndarray | None = None,
) -> Pose:
    """Weighted closed-form rigid transform from offset-corrected pairs.

    Both directional constraint sets enter one stacked weighted Kabsch solve:
    sources are {p_i + fwd_i} union {p_j}, targets {q_i} union {q_j + bwd_j}.
    The returned pose maps the first cloud's frame into the second's.
    """
    if len(pairs) < 3:
        raise DegenerateGeometryError(f"need >= 3 pairs for a rigid solve, got {len(pairs)}")
    idx_p = np.array([c.index_p for c in pairs], dtype=np.int64)
    idx_q = np.array([c.index_q for c in pairs], dtype=np.int64)
    p = positions_p[idx_p]
    q = positions_q[idx_q]
    offsets_fwd = np.asarray(offsets_fwd, dtype=np.float64).reshape(len(pairs), 3)
    offsets_bwd = np.asarray(offsets_bwd, dtype=np.float64).reshape(len(pairs), 3)
    src = np.vstack([p + offsets_fwd, p])
    dst = np.vstack([q, q + offsets_bwd])
    if weights is None:
        w = np.ones(src.shape[0])
    else:
        w = np.concatenate([weights, weights]).astype(np.float64)
        w = np.maximum(w, 0.0)
        if w.sum() <= 0:
            w = np.ones(src.shape[0])
    w = w / w.sum()
    return weighted_kabsch(src, dst, w)


def weighted_kabsch(src: np.ndarray, dst: np.ndarray, w: np.ndarray) -> Pose:
    """argmin_T sum_i w_i || T(src_i) - dst_i ||^2 with det(R) = +1."""
    mu_s = (src * w[:, None]).sum(axis=0)
    mu_d = (dst * w[:, None]).sum(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    h = (cs * w[:, None]).T @ cd
    u, sing, vt = np.linalg.svd(h)
    if sing[1] <= max(sing[0], 1.0) * 1e-14:
        raise DegenerateGeometryError(
            f"correspondence geometry is degenerate (singular values {sing})"
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_d - r @ mu_s
    return Pose(r, t)


def register(
    p: DescriptorCloud,
    q: DescriptorCloud,
    store: nn.ParameterStore,
    cfg: DecoderConfig,
) -> RegistrationResult:
    """Full registration of descriptor cloud ``p`` onto ``q``.

    Works for any mix of scan-level and merged map-level clouds.
    """
    p_corr, q_corr = correlate(p, q, store, cfg)
    s = similarity_matrix(p_corr, q_corr, store, cfg)
    pairs = top_k_correspondences(s, cfg.top_k)
    offsets_fwd, offsets_bwd = predict_offsets(p_corr, q_corr, pairs, store, cfg)
    sims = np.array([c.similarity for c in pairs])
    if cfg.svd_weighting == "similarity":
        weights = np.maximum(sims, 0.0)
        if weights.sum() <= 0:
            weights = np.ones(len(pairs))
    else:
        weights = np.ones(len(pairs))
    transform = solve_transform(
        pairs, offsets_fwd, offsets_bwd, p.positions, q.positions, weights
    )
    idx_p = np.array([c.index_p for c in pairs], dtype=np.int64)
    idx_q = np.array([c.index_q for c in pairs], dtype=np.int64)
    src = np.vstack([p.positions[idx_p] + offsets_fwd, p.positions[idx_p]])
    dst = np.vstack([q.positions[idx_q], q.positions[idx_q] + offsets_bwd])
    residuals = np.linalg.norm(transform.apply(src) - dst, axis=1)
    inlier_ratio = float((residuals <= cfg.inlier_distance).mean())
    rmse = float(np.sqrt((residuals**2).mean()))
    return RegistrationResult(
        transform=transform,
        correspondences=pairs,
        offsets_fwd=offsets_fwd,
        offsets_bwd=offsets_bwd,
        confidence=float(sims.mean()),
        inlier_ratio=inlier_ratio,
        rmse=rmse,
    )
