"""Shortcut-probing baselines: single-modality heads and histogram samplers."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import AdamState, LrSchedule, adam_step
from .scenegen import DatasetView
from .scn import ModelConfig, question_onehot

__all__ = ["random_baseline", "train_single_modality", "predict_single_modality"]


def random_baseline(histogram: Mapping[int, float], n: int, seed: int) -> list[int]:
    """Labels sampled from a (possibly unnormalized) label histogram."""
    labels = sorted(histogram)
    weights = np.array([float(histogram[k]) for k in labels])
    if weights.size == 0 or float(weights.sum()) <= 0.0 or float(weights.min()) < 0.0:
        raise ValueError("histogram must carry positive total mass")
    p = weights / weights.sum()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
    draws = rng.choice(len(labels), size=n, p=p)
    return [labels[i] for i in draws]


def _modal_input(kind: str, view: DatasetView, tid: int, config: ModelConfig) -> np.ndarray:
    if kind == "q-only":
        return question_onehot(view[tid].question, config)
    feats = np.stack([r.feature for r in view[tid].regions])
    return feats.mean(axis=0, keepdims=True)


def train_single_modality(kind: str, view: DatasetView, train_ids: Sequence[int],
                          config: ModelConfig, seed: int, epochs: int = 6,
                          batch_size: int = 64, lr: float = 5e-3, hidden: int = 32
                          ) -> dict[str, np.ndarray]:
    """Small softmax head over one modality, cross-entropy trained.

    ``q-only`` sees the question multi-hot; ``i-only`` the mean region
    feature.  Both predict over the 0..max_label range.
    """
    if kind not in ("q-only", "i-only"):
        raise ValueError(f"unknown single-modality kind {kind!r}")
    dim_in = config.vocab_size if kind == "q-only" else config.feature_dim
    n_out = config.max_label + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB15]))
    params = {
        "w1": rng.normal(0.0, np.sqrt(2.0 / (dim_in + hidden)), size=(dim_in, hidden)),
        "w2": rng.normal(0.0, np.sqrt(2.0 / (hidden + n_out)), size=(hidden, n_out)),
    }
    state = AdamState(params, LrSchedule(lr))
    inputs = {tid: _modal_input(kind, view, tid, config) for tid in train_ids}
    onehots = {}
    for tid in train_ids:
        col = np.zeros((n_out, 1))
        col[min(view[tid].count, config.max_label), 0] = 1.0
        onehots[tid] = col

    ids = list(train_ids)
    for epoch in range(epochs):
        order = [ids[i] for i in rng.permutation(len(ids))]
        for b0 in range(0, len(order), batch_size):
            batch = order[b0:b0 + batch_size]
            tape = T.Tape()
            w1 = tape.watch("w1", params["w1"])
            w2 = tape.watch("w2", params["w2"])
            loss = None
            for tid in batch:
                probs = T.softmax_rows(T.matmul(T.tanh(T.matmul(T.Tensor(inputs[tid]), w1)), w2))
                ce = T.scale(T.sum_all(T.log(T.matmul(probs, T.Tensor(onehots[tid])))), -1.0)
                loss = ce if loss is None else T.add(loss, ce)
            grads = T.backward(tape, T.scale(loss, 1.0 / len(batch)))
            params = adam_step(params, grads, state)
    return params


def predict_single_modality(kind: str, view: DatasetView, ids: Sequence[int],
                            params: Mapping[str, np.ndarray], config: ModelConfig
                            ) -> list[int]:
    out = []
    for tid in ids:
        x = _modal_input(kind, view, tid, config)
        logits = np.tanh(x @ params["w1"]) @ params["w2"]
        out.append(int(np.argmax(logits)))
    return out
