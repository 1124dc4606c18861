"""Region-scoring counting network.

Each region feature is summed with a projection of its box coordinates,
fused with the question vector (low-rank bilinear: tanh-gated element-wise
product), contextualized by single-head scaled dot-product self-attention
with a residual, fused with the question again, and squashed to a score in
(0, 1).  The predicted count is the plain sum of region scores, rounded to
the nearest integer at prediction time.  A classification variant shares
the trunk and replaces the score head with a mean-pooled softmax over a
fixed label range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .scenegen import CountingTriplet, PREDICATES, Question

__all__ = [
    "ModelConfig",
    "ForwardTrace",
    "RegionScoreSet",
    "LossBreakdown",
    "CheckpointError",
    "init_parameters",
    "question_onehot",
    "triplet_arrays",
    "encode_inputs",
    "fuse",
    "self_attend",
    "score_regions",
    "forward_regression",
    "forward_classification",
    "loss_breakdown",
    "regression_loss",
    "classification_loss",
    "round_half_away",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]


HEADS = ("regression", "classification")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 24        # region feature width
    question_dim: int = 16       # question embedding width
    fusion_dim: int = 32         # hidden width of both bilinear fusions
    fused_dim: int = 32          # width of the fused region vectors
    attention_dim: int = 16      # query/key width of the single attention head
    n_heads: int = 1
    lambda_entropy: float = 1.0
    score_eps: float = 1e-6      # scores are clamped to [eps, 1-eps] before logs
    head: str = "regression"
    max_label: int = 15          # classification softmax covers 0..max_label
    cls_hidden_dim: int = 32
    n_classes: int = 8
    n_attributes: int = 4

    def __post_init__(self):
        for name in ("feature_dim", "question_dim", "fusion_dim", "fused_dim",
                     "attention_dim", "cls_hidden_dim", "n_classes", "n_attributes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_heads != 1:
            raise ValueError("only a single attention head is supported")
        if self.lambda_entropy < 0.0:
            raise ValueError("lambda_entropy must be >= 0")
        if not 0.0 < self.score_eps < 0.5:
            raise ValueError("score_eps must lie in (0, 0.5)")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.max_label < 0:
            raise ValueError("max_label must be >= 0")

    @property
    def vocab_size(self) -> int:
        # class tokens, attribute tokens, half-plane predicate tokens; the
        # question mode is implied by which optional tokens are present
        return self.n_classes + self.n_attributes + len(PREDICATES)

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "question_dim": self.question_dim,
            "fusion_dim": self.fusion_dim,
            "fused_dim": self.fused_dim,
            "attention_dim": self.attention_dim,
            "n_heads": self.n_heads,
            "lambda_entropy": self.lambda_entropy,
            "score_eps": self.score_eps,
            "head": self.head,
            "max_label": self.max_label,
            "cls_hidden_dim": self.cls_hidden_dim,
            "n_classes": self.n_classes,
            "n_attributes": self.n_attributes,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls().to_dict()})


@dataclass
class ForwardTrace:
    """Intermediate activations of one forward pass (plain arrays)."""

    encoded: np.ndarray          # (n_v, feature_dim)
    fused: np.ndarray            # (n_v, fused_dim)
    attention: np.ndarray        # (n_v, n_v), rows sum to 1
    contextual: np.ndarray       # (n_v, fused_dim) attention output r_i
    residual: np.ndarray         # (n_v, fused_dim) fused + contextual
    scores: np.ndarray           # (n_v,) clamped sigmoid scores


@dataclass
class RegionScoreSet:
    """Per-region scores, their sum, and the rounded count."""

    scores: list[float]
    total: float
    label: int

    def __post_init__(self):
        if abs(self.total - sum(self.scores)) > 1e-6:
            raise ValueError("total must equal the score sum within 1e-6")


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    entropy: float
    total: float
    lambda_entropy: float


def round_half_away(x: float) -> int:
    """Nearest integer with .5 ties rounded away from zero."""
    if x >= 0.0:
        return int(math.floor(x + 0.5))
    return int(math.ceil(x - 0.5))


# ---------------------------------------------------------------------------
# Parameters.
# ---------------------------------------------------------------------------


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    sd = math.sqrt(2.0 / (n_in + n_out))
    return rng.normal(0.0, sd, size=(n_in, n_out))


def init_parameters(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11D]))
    d_v, d_q = config.feature_dim, config.question_dim
    d_f, d_m, d_a = config.fusion_dim, config.fused_dim, config.attention_dim
    params = {
        "q_embed": _glorot(rng, config.vocab_size, d_q),
        "feat_proj": _glorot(rng, d_v, d_v),
        "coord_proj": _glorot(rng, 6, d_v),
        "fuse1_region": _glorot(rng, d_v, d_f),
        "fuse1_question": _glorot(rng, d_q, d_f),
        "fuse1_out": _glorot(rng, d_f, d_m),
        "attn_query": _glorot(rng, d_m, d_a),
        "attn_key": _glorot(rng, d_m, d_a),
        "attn_value": _glorot(rng, d_m, d_m),
        "fuse2_region": _glorot(rng, d_m, d_f),
        "fuse2_question": _glorot(rng, d_q, d_f),
        "fuse2_out": _glorot(rng, d_f, d_m),
        "score_proj": _glorot(rng, d_m, 1),
    }
    if config.head == "classification":
        params["cls_pool"] = _glorot(rng, d_m, config.cls_hidden_dim)
        params["cls_logits"] = _glorot(rng, config.cls_hidden_dim, config.max_label + 1)
    return params


# ---------------------------------------------------------------------------
# Input encoding.
# ---------------------------------------------------------------------------


def question_onehot(question: Question, config: ModelConfig) -> np.ndarray:
    """Multi-hot row over (class, attribute?, predicate?) tokens."""
    if question.class_id >= config.n_classes:
        raise ValueError(f"class id {question.class_id} outside model vocabulary")
    h = np.zeros((1, config.vocab_size))
    h[0, question.class_id] = 1.0
    if question.attribute_id is not None:
        if question.attribute_id >= config.n_attributes:
            raise ValueError("attribute id outside model vocabulary")
        h[0, config.n_classes + question.attribute_id] = 1.0
    if question.predicate is not None:
        h[0, config.n_classes + config.n_attributes + PREDICATES.index(question.predicate)] = 1.0
    return h


def triplet_arrays(triplet: CountingTriplet, config: ModelConfig
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(features, box coordinates, question multi-hot) as plain arrays.

    Box rows are (x1, y1, x2, y2, w, h); width and height are derived, never
    stored on the triplet.
    """
    if not triplet.regions:
        raise ValueError("a triplet must carry at least one region")
    feats = np.stack([r.feature for r in triplet.regions]).astype(np.float64)
    if feats.shape[1] != config.feature_dim:
        raise ValueError(
            f"feature dim {feats.shape[1]} does not match config {config.feature_dim}"
        )
    coords = np.array(
        [[r.box.x1, r.box.y1, r.box.x2, r.box.y2, r.box.width, r.box.height]
         for r in triplet.regions], dtype=np.float64)
    return feats, coords, question_onehot(triplet.question, config)


# ---------------------------------------------------------------------------
# Forward pass pieces; every piece works both on- and off-tape.
# ---------------------------------------------------------------------------


def encode_inputs(feats: T.Tensor, coords: T.Tensor, qhot: T.Tensor,
                  params: Mapping[str, T.Tensor]) -> tuple[T.Tensor, T.Tensor]:
    """Region vectors (projected feature + projected box) and question vector."""
    regions = T.add(T.matmul(feats, params["feat_proj"]),
                    T.matmul(coords, params["coord_proj"]))
    question = T.matmul(qhot, params["q_embed"])
    return regions, question


def fuse(regions: T.Tensor, question: T.Tensor, w_region: T.Tensor,
         w_question: T.Tensor, w_out: T.Tensor) -> T.Tensor:
    """Low-rank bilinear fusion: project, tanh-gate, multiply, project out."""
    n = regions.shape[0]
    gated_r = T.tanh(T.matmul(regions, w_region))
    gated_q = T.tanh(T.matmul(question, w_question))
    return T.matmul(T.mul(gated_r, T.tile_rows(gated_q, n)), w_out)


def self_attend(fused: T.Tensor, params: Mapping[str, T.Tensor],
                config: ModelConfig) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Scaled dot-product attention with residual; returns (m', r, weights)."""
    q = T.matmul(fused, params["attn_query"])
    k = T.matmul(fused, params["attn_key"])
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(config.attention_dim))
    weights = T.softmax_rows(scores)
    contextual = T.matmul(weights, T.matmul(fused, params["attn_value"]))
    return T.add(fused, contextual), contextual, weights


def score_regions(residual: T.Tensor, question: T.Tensor,
                  params: Mapping[str, T.Tensor], config: ModelConfig) -> T.Tensor:
    """Second fusion with the question, scalar projection, sigmoid, clamp."""
    fused2 = fuse(residual, question, params["fuse2_region"],
                  params["fuse2_question"], params["fuse2_out"])
    logits = T.matmul(fused2, params["score_proj"])
    raw = T.sigmoid(logits)
    return T.clip(raw, config.score_eps, 1.0 - config.score_eps)


def forward_regression(arrays: tuple[np.ndarray, np.ndarray, np.ndarray],
                       params: Mapping[str, T.Tensor], config: ModelConfig,
                       want_trace: bool = False
                       ) -> tuple[T.Tensor, T.Tensor, ForwardTrace | None]:
    """Full pass to (clamped scores (n_v, 1), count sum, optional trace)."""
    feats, coords, qhot = (T.Tensor(a) for a in arrays)
    regions, question = encode_inputs(feats, coords, qhot, params)
    fused = fuse(regions, question, params["fuse1_region"],
                 params["fuse1_question"], params["fuse1_out"])
    residual, contextual, weights = self_attend(fused, params, config)
    scores = score_regions(residual, question, params, config)
    total = T.sum_all(scores)
    trace = None
    if want_trace:
        trace = ForwardTrace(
            encoded=regions.data, fused=fused.data, attention=weights.data,
            contextual=contextual.data, residual=residual.data,
            scores=scores.data.reshape(-1),
        )
    return scores, total, trace


def forward_classification(arrays: tuple[np.ndarray, np.ndarray, np.ndarray],
                           params: Mapping[str, T.Tensor], config: ModelConfig
                           ) -> T.Tensor:
    """Shared trunk, mean-pooled, through the label softmax; returns (1, K+1)."""
    feats, coords, qhot = (T.Tensor(a) for a in arrays)
    regions, question = encode_inputs(feats, coords, qhot, params)
    fused = fuse(regions, question, params["fuse1_region"],
                 params["fuse1_question"], params["fuse1_out"])
    residual, _, _ = self_attend(fused, params, config)
    n = residual.shape[0]
    pool = T.matmul(T.Tensor(np.full((1, n), 1.0 / n)), residual)
    hidden = T.tanh(T.matmul(pool, params["cls_pool"]))
    return T.softmax_rows(T.matmul(hidden, params["cls_logits"]))


def regression_loss(scores: T.Tensor, total: T.Tensor, label: int,
                    config: ModelConfig) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """(squared error, mean per-region binary entropy, combined) as tensors."""
    n = scores.shape[0]
    diff = T.add(total, T.Tensor(np.asarray(-float(label))))
    mse = T.mul(diff, diff)
    ones = T.Tensor(np.ones_like(scores.data))
    one_minus = T.add(ones, T.scale(scores, -1.0))
    ent = T.add(T.mul(scores, T.log(scores)), T.mul(one_minus, T.log(one_minus)))
    entropy = T.scale(T.sum_all(ent), -1.0 / n)
    combined = T.add(mse, T.scale(entropy, config.lambda_entropy))
    return mse, entropy, combined


def classification_loss(probs: T.Tensor, label: int, config: ModelConfig) -> T.Tensor:
    """Cross-entropy against the integer label."""
    if not 0 <= label <= config.max_label:
        raise ValueError(f"label {label} outside classification range 0..{config.max_label}")
    onehot = np.zeros((config.max_label + 1, 1))
    onehot[label, 0] = 1.0
    picked = T.matmul(probs, T.Tensor(onehot))
    return T.scale(T.sum_all(T.log(picked)), -1.0)


def loss_breakdown(score_set: RegionScoreSet, label: int, config: ModelConfig
                   ) -> LossBreakdown:
    """Per-instance loss terms recomputed from a finished score set."""
    s = np.asarray(score_set.scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("score set is empty")
    if float(s.min()) <= 0.0 or float(s.max()) >= 1.0:
        raise ValueError("scores must lie strictly inside (0, 1) after clamping")
    mse = (score_set.total - float(label)) ** 2
    entropy = float(-np.mean(s * np.log(s) + (1.0 - s) * np.log(1.0 - s)))
    return LossBreakdown(
        mse=mse,
        entropy=entropy,
        total=mse + config.lambda_entropy * entropy,
        lambda_entropy=config.lambda_entropy,
    )


def predict(triplet: CountingTriplet, params: Mapping[str, np.ndarray],
            config: ModelConfig, want_trace: bool = False,
            allowed_labels: Sequence[int] | None = None
            ) -> tuple[RegionScoreSet | None, int, ForwardTrace | None]:
    """Off-tape forward pass to a predicted label.

    Regression returns the score set and the rounded sum; classification
    returns the argmax label (optionally restricted to ``allowed_labels``)
    with no score set.
    """
    arrays = triplet_arrays(triplet, config)
    tensors = {k: T.Tensor(v) for k, v in params.items()}
    if config.head == "regression":
        scores, total, trace = forward_regression(arrays, tensors, config, want_trace)
        flat = [float(v) for v in scores.data.reshape(-1)]
        score_set = RegionScoreSet(scores=flat, total=total.item(),
                                   label=round_half_away(total.item()))
        return score_set, score_set.label, trace
    probs = forward_classification(arrays, tensors, config).data.reshape(-1)
    if allowed_labels is not None:
        mask = np.full_like(probs, -np.inf)
        for lab in allowed_labels:
            mask[lab] = probs[lab]
        label = int(np.argmax(mask))
    else:
        label = int(np.argmax(probs))
    return None, label, None


def fractional_prediction(triplet: CountingTriplet, params: Mapping[str, np.ndarray],
                          config: ModelConfig) -> float:
    """The pre-rounding count estimate (the argmax label for classification)."""
    if config.head == "regression":
        score_set, _, _ = predict(triplet, params, config)
        return score_set.total
    _, label, _ = predict(triplet, params, config)
    return float(label)


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------

_CKPT_KIND = "countlab-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: ModelConfig,
                    provenance: Mapping | None = None) -> None:
    payload = {
        "kind": _CKPT_KIND,
        "version": _CKPT_VERSION,
        "config": config.to_dict(),
        "provenance": dict(provenance or {}),
        "params": {
            name: {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}
            for name, arr in params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path, expected_config: ModelConfig | None = None
                    ) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("kind") != _CKPT_KIND or payload.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"{path} is not a readable checkpoint")
    config = ModelConfig.from_dict(payload["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError("checkpoint config does not match the expected config")
    params = {
        name: np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        for name, rec in payload["params"].items()
    }
    return params, config, payload["provenance"]
