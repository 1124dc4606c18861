"""Experiment orchestration: generate, split, train, evaluate, sweep, report.

A run record embeds its full configuration, so any record can be rebuilt
from its own provenance.  Wall-clock timings are kept out of the canonical
record (they can never reproduce) and live in a sidecar.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import statistics
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema

from .baselines import predict_single_modality, random_baseline, train_single_modality
from .mcd import DatasetSplit, SplitStrategy, apply_strategy, carve_validation, \
    count_histogram
from .metrics import GroundingItem, average_precision, build_eval_report, ground_p
from .scenegen import Dataset, SceneSpec, combine_pools, generate_dataset
from .scn import ModelConfig, predict
from .training import TrainerConfig, predict_many, train

__all__ = [
    "ConfigError",
    "StageError",
    "GroundingConfig",
    "ExperimentConfig",
    "RunRecord",
    "run_experiment",
    "sweep_p",
    "grounding_study",
    "emit_report",
    "load_record",
]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class GroundingConfig:
    n_triplets: int = 600
    seed: int = 71
    detection_iou: float = 0.2   # matching threshold for average precision
    # grounding sets oversample small counts (zero included); None inherits
    # the scene spec's label weights
    label_weights: tuple[float, ...] | None = (4.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def to_dict(self) -> dict:
        return {"n_triplets": self.n_triplets, "seed": self.seed,
                "detection_iou": self.detection_iou,
                "label_weights": None if self.label_weights is None
                else list(self.label_weights)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundingConfig":
        lw = d.get("label_weights")
        return cls(int(d["n_triplets"]), int(d["seed"]), float(d["detection_iou"]),
                   None if lw is None else tuple(float(v) for v in lw))


@dataclass(frozen=True)
class BaselineToggles:
    q_only: bool = False
    i_only: bool = False
    random: bool = False

    def to_dict(self) -> dict:
        return {"q_only": self.q_only, "i_only": self.i_only, "random": self.random}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BaselineToggles":
        return cls(bool(d["q_only"]), bool(d["i_only"]), bool(d["random"]))


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_train_pool: int = 4000
    n_test: int = 1000
    train_pool_seed: int = 11
    test_pool_seed: int = 12
    mode_weights: tuple[float, float, float] = (0.6, 0.2, 0.2)
    questions_per_image: tuple[int, int] = (1, 2)
    carve_fraction: float = 0.10
    carve_seed: int = 13
    strategy_kind: str = "odd-even"
    strategy_p: float = 90.0
    strategy_seed: int = 14
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    train_seed: int = 15
    grounding: GroundingConfig | None = None
    baselines: BaselineToggles = field(default_factory=BaselineToggles)
    output_dir: str | None = None

    def validate(self) -> None:
        try:
            self.scene.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.n_train_pool < 1 or self.n_test < 1:
            raise ConfigError("pool sizes must be positive")
        if self.train_pool_seed == self.test_pool_seed:
            raise ConfigError("train and test pools need disjoint seeds")
        if len(self.mode_weights) != 3 or any(w < 0 for w in self.mode_weights) \
                or sum(self.mode_weights) <= 0:
            raise ConfigError("mode_weights must be three non-negative values")
        qlo, qhi = self.questions_per_image
        if not 1 <= qlo <= qhi or qhi >= self.scene.n_classes:
            raise ConfigError("questions_per_image must satisfy 1 <= lo <= hi < n_classes")
        if not 0.0 < self.carve_fraction < 1.0:
            raise ConfigError("carve_fraction must lie in (0, 1)")
        SplitStrategy(self.strategy_kind, self.strategy_p)
        if self.scene.n_classes != self.model.n_classes \
                or self.scene.n_attributes != self.model.n_attributes:
            raise ConfigError("model vocabulary must match the scene spec")
        if self.scene.feature_dim != self.model.feature_dim:
            raise ConfigError("model feature_dim must match the scene spec")
        if self.model.max_label < len(self.scene.label_weights) - 1:
            raise ConfigError("model max_label cannot represent every dataset label")
        if self.grounding is not None and self.grounding.label_weights is not None \
                and len(self.grounding.label_weights) - 1 > self.scene.max_instances:
            raise ConfigError("grounding label weights exceed max_instances")
        if self.grounding is not None and self.model.head != "regression":
            raise ConfigError("grounding evaluation needs per-region scores "
                              "(regression head)")

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "n_train_pool": self.n_train_pool,
            "n_test": self.n_test,
            "train_pool_seed": self.train_pool_seed,
            "test_pool_seed": self.test_pool_seed,
            "mode_weights": list(self.mode_weights),
            "questions_per_image": list(self.questions_per_image),
            "carve_fraction": self.carve_fraction,
            "carve_seed": self.carve_seed,
            "strategy_kind": self.strategy_kind,
            "strategy_p": self.strategy_p,
            "strategy_seed": self.strategy_seed,
            "model": self.model.to_dict(),
            "trainer": self.trainer.to_dict(),
            "train_seed": self.train_seed,
            "grounding": self.grounding.to_dict() if self.grounding else None,
            "baselines": self.baselines.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        return cls(
            scene=SceneSpec.from_dict(d["scene"]),
            n_train_pool=int(d["n_train_pool"]),
            n_test=int(d["n_test"]),
            train_pool_seed=int(d["train_pool_seed"]),
            test_pool_seed=int(d["test_pool_seed"]),
            mode_weights=tuple(float(v) for v in d["mode_weights"]),
            questions_per_image=tuple(int(v) for v in d["questions_per_image"]),
            carve_fraction=float(d["carve_fraction"]),
            carve_seed=int(d["carve_seed"]),
            strategy_kind=str(d["strategy_kind"]),
            strategy_p=float(d["strategy_p"]),
            strategy_seed=int(d["strategy_seed"]),
            model=ModelConfig.from_dict(d["model"]),
            trainer=TrainerConfig.from_dict(d["trainer"]),
            train_seed=int(d["train_seed"]),
            grounding=None if d.get("grounding") is None
            else GroundingConfig.from_dict(d["grounding"]),
            baselines=BaselineToggles.from_dict(d["baselines"])
            if d.get("baselines") else BaselineToggles(),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


@dataclass
class RunRecord:
    config: dict
    split_provenance: dict
    split_sizes: dict
    history: list[dict]
    best_epoch: int
    validation_report: dict
    test_report: dict
    grounding_report: dict | None
    baseline_reports: dict | None
    timings: dict[str, float]

    def canonical(self) -> dict:
        return {
            "config": self.config,
            "split_provenance": self.split_provenance,
            "split_sizes": self.split_sizes,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "validation_report": self.validation_report,
            "test_report": self.test_report,
            "grounding_report": self.grounding_report,
            "baseline_reports": self.baseline_reports,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))


def build_dataset(config: ExperimentConfig) -> Dataset:
    train_pool = generate_dataset(config.scene, config.n_train_pool,
                                  config.train_pool_seed, image_prefix="train",
                                  mode_weights=config.mode_weights,
                                  questions_per_image=config.questions_per_image)
    test_pool = generate_dataset(config.scene, config.n_test,
                                 config.test_pool_seed, image_prefix="test",
                                 mode_weights=config.mode_weights,
                                 questions_per_image=config.questions_per_image)
    return combine_pools(train_pool, test_pool)


def build_split(config: ExperimentConfig, dataset: Dataset) -> DatasetSplit:
    base = carve_validation(dataset, config.carve_fraction, config.carve_seed)
    return apply_strategy(base, SplitStrategy(config.strategy_kind, config.strategy_p),
                          config.strategy_seed, dataset)


def _grounding_items(config: ExperimentConfig, params, dataset_spec: SceneSpec
                     ) -> tuple[list[GroundingItem], dict[str, list]]:
    """Held-out grounding scenes scored by the trained model.

    Generated from a dedicated seed with plain questions only, the analog of
    an annotation-only grounding set disjoint from training images.
    """
    g = config.grounding
    weights = g.label_weights if g.label_weights is not None \
        else tuple(dataset_spec.label_weights)
    ds = generate_dataset(dataset_spec, g.n_triplets, g.seed, image_prefix="ground",
                          mode_weights=(1.0, 0.0, 0.0), label_weights=weights)
    items: list[GroundingItem] = []
    by_class: dict[int, list[GroundingItem]] = {}
    for t in ds.triplets:
        score_set, _, _ = predict(t, params, config.model)
        item = GroundingItem(boxes=[r.box for r in t.regions],
                             scores=list(score_set.scores),
                             gt_boxes=list(t.gt_boxes))
        items.append(item)
        by_class.setdefault(t.question.class_id, []).append(item)
    return items, by_class


def _grounding_report(config: ExperimentConfig, params, spec: SceneSpec) -> dict:
    items, by_class = _grounding_items(config, params, spec)
    geval = ground_p(items)
    pooled_ap = average_precision(items, config.grounding.detection_iou)
    per_class = [average_precision(cls_items, config.grounding.detection_iou)
                 for _, cls_items in sorted(by_class.items())]
    defined = [v for v in per_class if v is not None]
    return {
        "ground_p": geval.corpus,
        "score_mass": sum(geval.per_item_total),
        "ap": (sum(defined) / len(defined)) if defined else None,
        "ap_pooled": pooled_ap,
        "ap_pooling": "per-question-class mean (pooled value also reported)",
        "detection_iou": config.grounding.detection_iou,
        "n_items": len(items),
    }


def run_experiment(config: ExperimentConfig) -> RunRecord:
    """Generate, carve, thin, train, select on validation, evaluate once."""
    config.validate()
    timings: dict[str, float] = {}

    def staged(stage: str, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as exc:
            raise StageError(stage, exc) from exc
        timings[stage] = time.perf_counter() - t0
        return out

    dataset = staged("generate", lambda: build_dataset(config))
    split = staged("split", lambda: build_split(config, dataset))
    # the trainer's view physically excludes test triplets
    view = dataset.restrict(tuple(split.train) + tuple(split.validation))
    params, history = staged("train", lambda: train(
        view, split.train, split.validation, config.model, config.trainer,
        config.train_seed))
    best_epoch = history[-1]["best_epoch"] if history else -1

    def eval_set(ids):
        eview = dataset.restrict(ids)
        labels, values = predict_many(eview, ids, params, config.model)
        truth = [dataset.triplets[i].count for i in ids]
        return build_eval_report(labels, values, truth, provenance={
            "split": split.provenance, "config_hash": config.config_hash(),
        }).to_dict()

    val_report = staged("validate", lambda: eval_set(split.validation))
    test_report = staged("evaluate", lambda: eval_set(split.test))

    grounding_report = None
    if config.grounding is not None:
        grounding_report = staged(
            "grounding", lambda: _grounding_report(config, params, config.scene))

    baseline_reports = None
    if config.baselines.q_only or config.baselines.i_only or config.baselines.random:
        baseline_reports = staged(
            "baselines", lambda: _baseline_reports(config, dataset, split, view))

    return RunRecord(
        config=config.to_dict(),
        split_provenance=dict(split.provenance),
        split_sizes={"train": len(split.train), "validation": len(split.validation),
                     "test": len(split.test)},
        history=history,
        best_epoch=best_epoch,
        validation_report=val_report,
        test_report=test_report,
        grounding_report=grounding_report,
        baseline_reports=baseline_reports,
        timings=timings,
    )


def _baseline_reports(config: ExperimentConfig, dataset: Dataset,
                      split: DatasetSplit, view) -> dict:
    out: dict[str, dict] = {}
    test_view = dataset.restrict(split.test)
    truth = [dataset.triplets[i].count for i in split.test]
    for kind, enabled in (("q-only", config.baselines.q_only),
                          ("i-only", config.baselines.i_only)):
        if not enabled:
            continue
        params = train_single_modality(kind, view, split.train, config.model,
                                       config.train_seed)
        preds = predict_single_modality(kind, test_view, split.test, params, config.model)
        out[kind] = build_eval_report(preds, [float(p) for p in preds], truth).to_dict()
    if config.baselines.random:
        for name, ids in (("random-train", split.train), ("random-test", split.test)):
            hist = count_histogram(ids, dataset)
            preds = random_baseline(hist, len(split.test), config.train_seed)
            out[name] = build_eval_report(preds, [float(p) for p in preds], truth).to_dict()
    return out


# ---------------------------------------------------------------------------
# Sweeps and paired grounding runs.
# ---------------------------------------------------------------------------


def _cell_path(cache_dir: Path, cfg: ExperimentConfig) -> Path:
    return cache_dir / f"{cfg.config_hash()}.json"


def run_cached(config: ExperimentConfig, cache_dir: str | Path | None) -> RunRecord:
    """run_experiment with an on-disk cell cache keyed by the config hash."""
    if cache_dir is None:
        return run_experiment(config)
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    path = _cell_path(cache, config)
    if path.exists():
        payload = json.loads(path.read_text())
        return RunRecord(timings=payload.get("timings", {}),
                         **{k: payload["record"][k] for k in payload["record"]})
    record = run_experiment(config)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"record": record.canonical(),
                               "timings": record.timings}, sort_keys=True))
    os.replace(tmp, path)
    return record


def sweep_p(config: ExperimentConfig, p_values: Sequence[float],
            variants: Sequence[str] = ("regression", "classification"),
            seeds: Sequence[int] = (15, 16, 17),
            cache_dir: str | Path | None = None) -> list[dict]:
    """One run per (p, head variant, seed); failed cells are marked, not fatal.

    Returns long-format rows ready for CSV emission.
    """
    for p in p_values:
        if not 0.0 <= p <= 100.0:
            raise ConfigError(f"sweep p value {p} outside [0, 100]")
    rows: list[dict] = []
    for p in p_values:
        for variant in variants:
            for seed in seeds:
                cell = replace(
                    config,
                    strategy_p=float(p),
                    model=replace(config.model, head=variant),
                    train_seed=int(seed),
                )
                row = {"strategy": config.strategy_kind, "p": float(p),
                       "variant": variant, "seed": int(seed)}
                try:
                    record = run_cached(cell, cache_dir)
                    row.update(
                        test_accuracy=record.test_report["accuracy"],
                        test_rmse=record.test_report["rmse"],
                        val_accuracy=record.validation_report["accuracy"],
                        best_epoch=record.best_epoch,
                        error=None,
                    )
                except Exception as exc:  # cell failures must not kill the sweep
                    row.update(test_accuracy=None, test_rmse=None,
                               val_accuracy=None, best_epoch=None, error=str(exc))
                rows.append(row)
    return rows


def sweep_medians(rows: Sequence[Mapping]) -> dict[tuple[float, str], float]:
    """Median test accuracy per (p, variant) over seeds, ignoring failed cells."""
    cells: dict[tuple[float, str], list[float]] = {}
    for row in rows:
        if row.get("test_accuracy") is None:
            continue
        cells.setdefault((row["p"], row["variant"]), []).append(row["test_accuracy"])
    return {key: statistics.median(vals) for key, vals in cells.items()}


def grounding_study(config: ExperimentConfig, seeds: Sequence[int] = (15, 16, 17),
                    cache_dir: str | Path | None = None) -> list[dict]:
    """Paired runs with and without the entropy term on the unmodified split."""
    if config.grounding is None:
        raise ConfigError("grounding_study needs a grounding configuration")
    base = replace(config, strategy_p=0.0)
    out = []
    for seed in seeds:
        pair = {}
        for lam in (1.0, 0.0):
            cell = replace(base, train_seed=int(seed),
                           model=replace(base.model, lambda_entropy=lam, head="regression"))
            record = run_cached(cell, cache_dir)
            pair[f"lambda_{lam:g}"] = {
                "ground_p": record.grounding_report["ground_p"],
                "ap": record.grounding_report["ap"],
                "ap_pooled": record.grounding_report["ap_pooled"],
                "test_accuracy": record.test_report["accuracy"],
                "mean_entropy_best_epoch":
                    record.history[record.best_epoch]["train_entropy"],
            }
        out.append({"seed": int(seed), **pair})
    return out


# ---------------------------------------------------------------------------
# Report emission.
# ---------------------------------------------------------------------------


def _schema() -> dict:
    text = resources.files("countlab").joinpath("schemas/run_record.schema.json").read_text()
    return json.loads(text)


def validate_record(record_dict: Mapping) -> None:
    jsonschema.validate(instance=record_dict, schema=_schema())


def emit_report(record: RunRecord, out_dir: str | Path) -> dict[str, Path]:
    """Write record.json, timings.json and CSV tables atomically.

    The canonical record is schema-validated before anything is written;
    every file lands via write-to-temp-then-rename.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    canonical = record.canonical()
    validate_record(canonical)

    def write_text(name: str, text: str) -> Path:
        path = out / name
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
        return path

    files = {}
    files["record"] = write_text("record.json", record.canonical_json())
    files["timings"] = write_text(
        "timings.json",
        json.dumps({"note": "non-authoritative wall-clock timings",
                    "timings": record.timings}, sort_keys=True))

    per_label = {int(k): v for k, v in record.test_report["per_label"].items()}
    support = {int(k): v for k, v in record.test_report["per_label_support"].items()}
    lines = ["label,support,accuracy"]
    for label in sorted(per_label):
        lines.append(f"{label},{support.get(label, 0)},{per_label[label]!r}")
    files["per_label"] = write_text("per_label_accuracy.csv", "\n".join(lines) + "\n")

    hist_lines = ["epoch,train_loss,train_mse,train_entropy,val_accuracy,lr"]
    for h in record.history:
        hist_lines.append(",".join("" if h[k] is None else repr(h[k])
                                   for k in ("epoch", "train_loss", "train_mse",
                                             "train_entropy", "val_accuracy", "lr")))
    files["history"] = write_text("history.csv", "\n".join(hist_lines) + "\n")
    return files


def emit_sweep_csv(rows: Sequence[Mapping], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["strategy", "p", "variant", "seed", "test_accuracy", "test_rmse",
            "val_accuracy", "best_epoch", "error"]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in cols})
    os.replace(tmp, path)
    return path


def load_record(path: str | Path) -> RunRecord:
    payload = json.loads(Path(path).read_text())
    return RunRecord(timings={}, **payload)
