"""Command-line entry points.

Configuration comes from a plain ``key = value`` file (dotted keys address
nested fields, values are JSON literals with a bare-string fallback) plus
repeatable ``--set key=value`` overrides.  Exit codes: 0 success, 1
validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentConfig,
    GroundingConfig,
    emit_report,
    emit_sweep_csv,
    grounding_study,
    load_record,
    run_experiment,
    sweep_p,
)
from .mcd import DatasetSplit, SplitStrategy, apply_strategy, carve_validation
from .scenegen import load_dataset, save_dataset
from .scn import load_checkpoint, save_checkpoint
from .training import predict_many, train
from .metrics import build_eval_report

__all__ = ["main"]


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Flat ``key = value`` pairs; '#' starts a comment, blank lines ignored."""
    out: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def _assign(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        nxt = node.get(part)
        if not isinstance(nxt, dict):
            nxt = {}
            node[part] = nxt
        node = nxt
    node[parts[-1]] = value


def build_experiment_config(flat: dict[str, object]) -> ExperimentConfig:
    base = ExperimentConfig().to_dict()
    grounding_requested = any(k.startswith("grounding.") or k == "grounding"
                              for k in flat)
    if grounding_requested and base["grounding"] is None:
        base["grounding"] = GroundingConfig().to_dict()
    extras = {}
    for key, value in flat.items():
        if key.startswith("sweep."):
            extras[key] = value
            continue
        _assign(base, key, value)
    cfg = ExperimentConfig.from_dict(base)
    cfg.validate()
    return cfg


def _gather_flat(args) -> dict[str, object]:
    flat: dict[str, object] = {}
    if getattr(args, "config", None):
        flat.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        flat[key.strip()] = _parse_value(raw)
    return flat


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation failures
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def _cmd_generate(args) -> int:
    from .harness import build_dataset
    cfg = build_experiment_config(_gather_flat(args))
    ds = build_dataset(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} triplets ({len(ds.test_ids)} test) to {args.out}")
    return 0


def _cmd_split(args) -> int:
    cfg = build_experiment_config(_gather_flat(args))
    ds = load_dataset(args.dataset)
    base = carve_validation(ds, cfg.carve_fraction, cfg.carve_seed)
    split = apply_strategy(base, SplitStrategy(cfg.strategy_kind, cfg.strategy_p),
                           cfg.strategy_seed, ds)
    Path(args.out).write_text(json.dumps(split.to_dict(), sort_keys=True))
    print(f"split sizes: train={len(split.train)} val={len(split.validation)} "
          f"test={len(split.test)} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = build_experiment_config(_gather_flat(args))
    ds = load_dataset(args.dataset)
    split = DatasetSplit.from_dict(json.loads(Path(args.split).read_text()))
    view = ds.restrict(tuple(split.train) + tuple(split.validation))
    params, history = train(view, split.train, split.validation, cfg.model,
                            cfg.trainer, cfg.train_seed)
    save_checkpoint(args.out, params, cfg.model, provenance={
        "dataset_hash": ds.content_hash(),
        "split_provenance": split.provenance,
        "train_seed": cfg.train_seed,
        "history": history,
    })
    best = history[-1]["best_epoch"]
    print(f"trained {cfg.model.head} head, best epoch {best}, "
          f"val acc {history[best]['val_accuracy']:.2f} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = build_experiment_config(_gather_flat(args))
    ds = load_dataset(args.dataset)
    split = DatasetSplit.from_dict(json.loads(Path(args.split).read_text()))
    params, model_cfg, _ = load_checkpoint(args.checkpoint, expected_config=cfg.model)
    ids = getattr(split, args.on)
    view = ds.restrict(ids)
    labels, values = predict_many(view, ids, params, model_cfg)
    truth = [ds.triplets[i].count for i in ids]
    report = build_eval_report(labels, values, truth,
                               provenance={"split": split.provenance})
    Path(args.out).write_text(json.dumps(report.to_dict(), sort_keys=True))
    print(f"{args.on}: accuracy {report.accuracy:.2f} rmse {report.rmse:.3f} -> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    flat = _gather_flat(args)
    p_values = flat.pop("sweep.p_values", [0.0, 50.0, 90.0, 100.0])
    seeds = flat.pop("sweep.seeds", [15, 16, 17])
    cfg = build_experiment_config(flat)
    rows = sweep_p(cfg, [float(p) for p in p_values],
                   seeds=[int(s) for s in seeds], cache_dir=args.cache_dir)
    out = emit_sweep_csv(rows, Path(args.out))
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} cells ({failed} failed) -> {out}")
    return 0


def _cmd_grounding(args) -> int:
    flat = _gather_flat(args)
    flat.setdefault("grounding.n_triplets", GroundingConfig().n_triplets)
    seeds = flat.pop("sweep.seeds", [15, 16, 17])
    cfg = build_experiment_config(flat)
    pairs = grounding_study(cfg, seeds=[int(s) for s in seeds],
                            cache_dir=args.cache_dir)
    Path(args.out).write_text(json.dumps(pairs, sort_keys=True, indent=2))
    print(f"grounding pairs for seeds {list(seeds)} -> {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = build_experiment_config(_gather_flat(args))
    record = run_experiment(cfg)
    files = emit_report(record, args.out)
    print(f"test accuracy {record.test_report['accuracy']:.2f} -> {files['record']}")
    return 0


def _cmd_report(args) -> int:
    record = load_record(args.record)
    files = emit_report(record, args.out)
    print("wrote " + ", ".join(str(p) for p in files.values()))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(prog="countlab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset file")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("split", help="carve validation and apply a parity strategy")
    _add_config_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_split)

    p = sub.add_parser("train", help="train on a dataset + split")
    _add_config_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--on", choices=("validation", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep", help="removal-percentage sweep over head variants")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir", default=None)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("grounding", help="paired runs with/without entropy term")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir", default=None)
    p.set_defaults(fn=_cmd_grounding)

    p = sub.add_parser("run", help="full experiment into a report directory")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("report", help="re-emit CSV tables from a record.json")
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)

    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
