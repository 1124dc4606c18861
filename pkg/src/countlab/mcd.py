"""Count-label distribution-shift protocol: carve, parity removal, reporting.

Training and validation always share the count-label distribution; the
designated test partition is shifted the opposite way.  Removal never moves
a triplet between sets, so the image-disjointness established by the carve
survives every strategy.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from math import ceil
from typing import Mapping, Sequence

import numpy as np

from .scenegen import Dataset

__all__ = [
    "MCDError",
    "SplitStrategy",
    "DatasetSplit",
    "DistributionStats",
    "carve_validation",
    "apply_strategy",
    "replay_split",
    "count_histogram",
    "bhattacharyya",
    "normalize_hist",
    "split_report",
]


class MCDError(ValueError):
    pass


@dataclass(frozen=True)
class SplitStrategy:
    """Parity-based removal: ``kind`` names which parity leaves the train side."""

    kind: str  # "odd-even" or "even-odd"
    p: float   # removal percentage in [0, 100]

    def __post_init__(self):
        if self.kind not in ("odd-even", "even-odd"):
            raise MCDError(f"unknown strategy kind {self.kind!r}")
        if not 0.0 <= self.p <= 100.0:
            raise MCDError(f"p must lie in [0, 100], got {self.p}")

    def removed_parity(self, set_name: str) -> int:
        """Parity (0 even, 1 odd) removed from the given set."""
        train_side = 0 if self.kind == "odd-even" else 1
        if set_name in ("train", "validation"):
            return train_side
        return 1 - train_side


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]
    provenance: dict

    def __post_init__(self):
        sets = (set(self.train), set(self.validation), set(self.test))
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise MCDError("train/validation/test id sets must be pairwise disjoint")

    def ids_of(self, set_name: str) -> tuple[int, ...]:
        return getattr(self, set_name if set_name != "validation" else "validation")

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSplit":
        return cls(
            train=tuple(int(i) for i in d["train"]),
            validation=tuple(int(i) for i in d["validation"]),
            test=tuple(int(i) for i in d["test"]),
            provenance=dict(d["provenance"]),
        )


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def carve_validation(dataset: Dataset, fraction: float, seed: int) -> DatasetSplit:
    """Hold out a fraction of images; all their triplets become validation.

    The carve is image-level so no image contributes to both train and
    validation.  The designated test partition passes through untouched.
    """
    if not 0.0 < fraction < 1.0:
        raise MCDError(f"carve fraction must lie in (0, 1), got {fraction}")
    test_ids = set(dataset.test_ids)
    pool_ids = [i for i in range(len(dataset)) if i not in test_ids]
    images = sorted({dataset.triplets[i].image_id for i in pool_ids})
    if len(images) < 2:
        raise MCDError("cannot carve an image-disjoint validation set from a single image")
    n_hold = ceil(fraction * len(images))
    rng = _rng(seed, 0xCA)
    held = set(rng.choice(len(images), size=n_hold, replace=False).tolist())
    held_images = {images[i] for i in held}
    train, validation = [], []
    for i in pool_ids:
        (validation if dataset.triplets[i].image_id in held_images else train).append(i)
    provenance = {
        "dataset_hash": dataset.content_hash(),
        "carve_fraction": fraction,
        "carve_seed": seed,
        "strategy": None,
        "strategy_seed": None,
    }
    return DatasetSplit(tuple(train), tuple(validation), tuple(dataset.test_ids),
                        provenance=provenance)


def apply_strategy(split: DatasetSplit, strategy: SplitStrategy, seed: int,
                   dataset: Dataset) -> DatasetSplit:
    """Remove round(p% of n) triplets per count label of the targeted parity.

    Train and validation lose the same parity; test loses the opposite one.
    Sampling is uniform without replacement within each label, with one
    independent stream per (set, label) so membership replays exactly from
    (dataset hash, seeds, strategy).
    """
    labels = dataset.labels()

    def thin(ids: Sequence[int], parity: int, stream: int) -> tuple[int, ...]:
        by_label: dict[int, list[int]] = {}
        for i in ids:
            by_label.setdefault(labels[i], []).append(i)
        removed: set[int] = set()
        for label in sorted(by_label):
            if label % 2 != parity:
                continue
            members = by_label[label]
            k = int(round(strategy.p / 100.0 * len(members)))
            if k == 0:
                continue
            rng = _rng(seed, 0x57, stream, label)
            picks = rng.choice(len(members), size=k, replace=False)
            removed.update(members[j] for j in picks.tolist())
        return tuple(i for i in ids if i not in removed)

    provenance = dict(split.provenance)
    provenance["strategy"] = {"kind": strategy.kind, "p": strategy.p}
    provenance["strategy_seed"] = seed
    return DatasetSplit(
        train=thin(split.train, strategy.removed_parity("train"), 0),
        validation=thin(split.validation, strategy.removed_parity("validation"), 1),
        test=thin(split.test, strategy.removed_parity("test"), 2),
        provenance=provenance,
    )


def replay_split(dataset: Dataset, provenance: Mapping) -> DatasetSplit:
    """Rebuild a split purely from its recorded provenance."""
    if provenance["dataset_hash"] != dataset.content_hash():
        raise MCDError("provenance refers to a different dataset")
    base = carve_validation(dataset, provenance["carve_fraction"], provenance["carve_seed"])
    strat = provenance.get("strategy")
    if strat is None:
        return base
    return apply_strategy(base, SplitStrategy(strat["kind"], strat["p"]),
                          provenance["strategy_seed"], dataset)


def count_histogram(ids: Sequence[int], dataset: Dataset) -> dict[int, int]:
    """Exact per-count-label tally over the given triplet ids."""
    hist: dict[int, int] = {}
    n = len(dataset)
    for i in ids:
        if not 0 <= int(i) < n:
            raise MCDError(f"unknown triplet id {i}")
        label = dataset.triplets[int(i)].count
        hist[label] = hist.get(label, 0) + 1
    return dict(sorted(hist.items()))


def normalize_hist(hist: Mapping[int | str, float]) -> dict:
    total = float(sum(hist.values()))
    if total <= 0.0:
        raise MCDError("cannot normalize an empty histogram")
    return {k: v / total for k, v in hist.items()}


def bhattacharyya(p: Mapping | Sequence[float], q: Mapping | Sequence[float]) -> float:
    """Overlap coefficient between two discrete distributions.

    Both inputs must be non-negative and sum to 1 within 1e-9; mappings are
    aligned over the union of their supports, sequences index-aligned.
    """
    if isinstance(p, Mapping) != isinstance(q, Mapping):
        raise MCDError("bhattacharyya: mixed mapping/sequence inputs")
    if isinstance(p, Mapping):
        support = sorted(set(p) | set(q), key=str)
        pv = np.array([float(p.get(k, 0.0)) for k in support])
        qv = np.array([float(q.get(k, 0.0)) for k in support])
    else:
        pv = np.asarray(p, dtype=float)
        qv = np.asarray(q, dtype=float)
        if pv.shape != qv.shape:
            raise MCDError("bhattacharyya: sequence inputs must share a support")
    for name, v in (("p", pv), ("q", qv)):
        if v.size == 0:
            raise MCDError(f"bhattacharyya: {name} is empty")
        if float(v.min(initial=0.0)) < 0.0:
            raise MCDError(f"bhattacharyya: {name} has negative mass")
        if abs(float(v.sum()) - 1.0) > 1e-9:
            raise MCDError(f"bhattacharyya: {name} does not normalize to 1")
    return float(np.clip(np.sqrt(pv * qv).sum(), 0.0, 1.0))


@dataclass
class DistributionStats:
    """Histograms per set plus similarity coefficients vs the unmodified sets."""

    label_hist: dict[str, dict[int, int]]
    token_hist: dict[str, dict[str, int]]
    visual_hist: dict[str, dict[str, int]]
    coefficients: dict[str, dict[str, float]]  # set -> {"tokens": c, "visual": c}

    def to_dict(self) -> dict:
        return {
            "label_hist": {s: {str(k): v for k, v in sorted(h.items())}
                           for s, h in self.label_hist.items()},
            "token_hist": {s: dict(sorted(h.items())) for s, h in self.token_hist.items()},
            "visual_hist": {s: dict(sorted(h.items())) for s, h in self.visual_hist.items()},
            "coefficients": self.coefficients,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _token_hist(ids: Sequence[int], dataset: Dataset) -> dict[str, int]:
    c: Counter = Counter()
    for i in ids:
        c.update(dataset.triplets[i].question.content_tokens())
    return dict(c)


def _visual_hist(ids: Sequence[int], dataset: Dataset) -> dict[str, int]:
    """Histogram of nearest-prototype categories over each set's proposals.

    Mirrors tallying the categories a detector assigns to its boxes: each
    proposal feature is scored against the class prototypes plus the
    background prototype, counting per image id so shared regions of one
    image are tallied once per set membership.
    """
    class_protos, _, background = dataset.spec.prototypes()
    protos = np.vstack([class_protos, background[None, :]])
    names = [f"cls:{k}" for k in range(len(class_protos))] + ["background"]
    c: Counter = Counter()
    for i in ids:
        for r in dataset.triplets[i].regions:
            c[names[int(np.argmax(protos @ r.feature))]] += 1
    return dict(c)


def split_report(split: DatasetSplit, dataset: Dataset) -> DistributionStats:
    """Distribution report for a (possibly thinned) split.

    Coefficients compare each set against its pre-strategy counterpart,
    replayed from the split's own provenance; identical memberships report
    exactly 1.0.
    """
    base = replay_split(dataset, {**split.provenance, "strategy": None,
                                  "strategy_seed": None})
    label_hist, token_hist, visual_hist, coefficients = {}, {}, {}, {}
    for name in ("train", "validation", "test"):
        ids = getattr(split, name)
        base_ids = getattr(base, name)
        label_hist[name] = count_histogram(ids, dataset)
        token_hist[name] = _token_hist(ids, dataset)
        visual_hist[name] = _visual_hist(ids, dataset)
        coefficients[name] = {}
        for kind, fn in (("tokens", _token_hist), ("visual", _visual_hist)):
            if tuple(ids) == tuple(base_ids):
                coefficients[name][kind] = 1.0
                continue
            mod = fn(ids, dataset)
            ref = fn(base_ids, dataset)
            if not mod or not ref:
                coefficients[name][kind] = 0.0
                continue
            coefficients[name][kind] = bhattacharyya(normalize_hist(mod),
                                                     normalize_hist(ref))
    return DistributionStats(label_hist, token_hist, visual_hist, coefficients)
