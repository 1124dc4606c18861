"""Mini-batch training loop with validation-selected checkpoints.

The trainer only ever sees a dataset view restricted to train + validation
ids; test triplets are physically absent from everything reachable here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import AdamState, LrSchedule, adam_step
from .scenegen import DatasetView
from .scn import (
    ModelConfig,
    classification_loss,
    forward_classification,
    forward_regression,
    init_parameters,
    predict,
    regression_loss,
    triplet_arrays,
)

__all__ = ["TrainerConfig", "TrainAbort", "train", "evaluate_accuracy", "predict_many"]


class TrainAbort(RuntimeError):
    """Training halted on a non-finite loss; message carries epoch and batch."""


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 10
    batch_size: int = 64
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(3e-3, 0.5, 4, 6))
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    uniform_label_sampling: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "schedule": {
                "base_rate": self.schedule.base_rate,
                "decay_factor": self.schedule.decay_factor,
                "decay_interval": self.schedule.decay_interval,
                "start_epoch": self.schedule.start_epoch,
            },
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "uniform_label_sampling": self.uniform_label_sampling,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainerConfig":
        s = d["schedule"]
        return cls(
            epochs=int(d["epochs"]),
            batch_size=int(d["batch_size"]),
            schedule=LrSchedule(float(s["base_rate"]), float(s["decay_factor"]),
                                int(s["decay_interval"]), int(s["start_epoch"])),
            beta1=float(d["beta1"]),
            beta2=float(d["beta2"]),
            adam_eps=float(d["adam_eps"]),
            uniform_label_sampling=bool(d["uniform_label_sampling"]),
        )


def _epoch_order(rng: np.random.Generator, train_ids: Sequence[int],
                 labels: dict[int, int], uniform: bool) -> list[int]:
    if not uniform:
        return [train_ids[i] for i in rng.permutation(len(train_ids))]
    # re-weight sampling so count labels are drawn uniformly (with replacement)
    pools: dict[int, list[int]] = {}
    for tid in train_ids:
        pools.setdefault(labels[tid], []).append(tid)
    keys = sorted(pools)
    out = []
    for _ in range(len(train_ids)):
        lab = keys[int(rng.integers(len(keys)))]
        pool = pools[lab]
        out.append(pool[int(rng.integers(len(pool)))])
    return out


def train(view: DatasetView, train_ids: Sequence[int], val_ids: Sequence[int],
          model_cfg: ModelConfig, trainer_cfg: TrainerConfig, seed: int
          ) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Optimize the mean loss over train ids; return best-validation params.

    The history records, per epoch, the mean loss terms, the mean per-region
    binary entropy, the validation accuracy, and the learning rate in force.
    Deterministic: identical (config, seed) pairs produce bit-identical
    histories and parameters.
    """
    missing = [i for i in list(train_ids) + list(val_ids) if i not in view]
    if missing:
        raise KeyError(f"ids {missing[:3]} are not visible to the trainer")
    if not train_ids or not val_ids:
        raise ValueError("both train and validation ids are required")

    arrays = {tid: triplet_arrays(view[tid], model_cfg)
              for tid in sorted(set(train_ids) | set(val_ids))}
    labels = {tid: view[tid].count for tid in arrays}

    params = init_parameters(model_cfg, seed)
    state = AdamState(params, trainer_cfg.schedule, trainer_cfg.beta1,
                      trainer_cfg.beta2, trainer_cfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA1]))

    history: list[dict] = []
    best_acc, best_params, best_epoch = -1.0, {k: v.copy() for k, v in params.items()}, -1
    bsz = trainer_cfg.batch_size

    for epoch in range(trainer_cfg.epochs):
        state.epoch = epoch
        order = _epoch_order(rng, list(train_ids), labels,
                             trainer_cfg.uniform_label_sampling)
        sum_total = sum_mse = sum_entropy = 0.0
        for b0 in range(0, len(order), bsz):
            batch = order[b0:b0 + bsz]
            tape = T.Tape()
            watched = {k: tape.watch(k, v) for k, v in params.items()}
            batch_loss = None
            for tid in batch:
                if model_cfg.head == "regression":
                    scores, total, _ = forward_regression(arrays[tid], watched, model_cfg)
                    mse, entropy, combined = regression_loss(
                        scores, total, labels[tid], model_cfg)
                    sum_mse += mse.item()
                    sum_entropy += entropy.item()
                else:
                    probs = forward_classification(arrays[tid], watched, model_cfg)
                    combined = classification_loss(probs, labels[tid], model_cfg)
                sum_total += combined.item()
                batch_loss = combined if batch_loss is None else T.add(batch_loss, combined)
            batch_loss = T.scale(batch_loss, 1.0 / len(batch))
            if not np.isfinite(batch_loss.item()):
                raise TrainAbort(f"non-finite loss at epoch {epoch} batch {b0 // bsz}")
            grads = T.backward(tape, batch_loss)
            params = adam_step(params, grads, state,
                               batch_id=f"epoch {epoch} batch {b0 // bsz}")

        val_acc = evaluate_accuracy(view, val_ids, params, model_cfg)
        n_seen = len(order)
        entry = {
            "epoch": epoch,
            "train_loss": sum_total / n_seen,
            "train_mse": (sum_mse / n_seen) if model_cfg.head == "regression" else None,
            "train_entropy": (sum_entropy / n_seen) if model_cfg.head == "regression" else None,
            "val_accuracy": val_acc,
            "lr": state.effective_rate(),
        }
        history.append(entry)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch

    for entry in history:
        entry["best_epoch"] = best_epoch
    return best_params, history


def predict_many(view: DatasetView, ids: Sequence[int], params: Mapping[str, np.ndarray],
                 config: ModelConfig) -> tuple[list[int], list[float]]:
    """Predicted labels and fractional values over an id list."""
    labels, values = [], []
    for tid in ids:
        if config.head == "regression":
            score_set, label, _ = predict(view[tid], params, config)
            labels.append(label)
            values.append(score_set.total)
        else:
            _, label, _ = predict(view[tid], params, config)
            labels.append(label)
            values.append(float(label))
    return labels, values


def evaluate_accuracy(view: DatasetView, ids: Sequence[int],
                      params: Mapping[str, np.ndarray], config: ModelConfig) -> float:
    preds, _ = predict_many(view, ids, params, config)
    truth = [view[tid].count for tid in ids]
    hits = sum(1 for p, t in zip(preds, truth) if p == t)
    return 100.0 * hits / len(ids)
