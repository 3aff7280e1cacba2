"""Command-line entry point.

Config precedence, lowest to highest: built-in defaults, the JSON file given by
``--config``, then individual flags. Every subcommand that trains or evaluates
writes a ``summary.json`` holding the fully materialized config; its
``generated_at`` field is the only content that changes between identical runs.

Exit status: 0 success, 1 usage error or missing file, 2 verification
violation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .autodiff import CHECKPOINT_MAGIC, NonFiniteError, ParamStore
from .oracle import SUITES, reports_json, run_suite
from .tasks import DATASET_FORMAT, KINDS, TaskSpec, generate, load_dataset, save_dataset, split
from .train import (
    HISTOGRAM_COLUMNS,
    METHODS,
    SoundnessError,
    SweepRun,
    TrainConfig,
    evaluate_model,
    make_data,
    sweep,
    sweep_summary,
    train_model,
    write_csv,
    write_histogram_csv,
    write_metrics_csv,
    write_records_jsonl,
    write_summary_json,
)

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_TAUS = (0.0, 1e-3, 5e-3, 1e-2, 5e-2)
DEFAULT_SEEDS = (1, 2, 3)

log = logging.getLogger("adapthalt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag -> (TrainConfig field, type); task fields are routed into TaskSpec
_TASK_FLAGS = {"task": ("kind", str), "length": ("length", int), "k_max": ("k_max", int), "task_seed": ("seed", int)}
_CONFIG_FLAGS = {
    "n_train": int, "n_eval": int, "state_dim": int, "N": int, "method": str, "tau": float,
    "epsilon": float, "lr": float, "beta1": float, "beta2": float, "adam_eps": float,
    "batch_size": int, "epochs": int, "seed": int,
}


def _add_config_flags(p: argparse.ArgumentParser, with_method: bool = True) -> None:
    p.add_argument("--config", help="JSON file of TrainConfig fields (flags override it)")
    p.add_argument("--task", choices=KINDS)
    p.add_argument("--length", type=int, help="payload length L")
    p.add_argument("--k-max", type=int)
    p.add_argument("--task-seed", type=int, help="seed for data generation and split")
    for name, typ in _CONFIG_FLAGS.items():
        if name == "method" and not with_method:
            continue
        kwargs: dict[str, Any] = {"type": typ, "dest": name}
        if name == "method":
            kwargs["choices"] = METHODS
        p.add_argument("--" + name.replace("_", "-"), **kwargs)


def _read_json(path: str) -> dict[str, Any]:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def _config_from(args: argparse.Namespace, base: dict[str, Any] | None = None) -> TrainConfig:
    d = dict(base or {})
    task = dict(d.get("task") or {})
    for flag, (field_name, _) in _TASK_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            task[field_name] = v
    d["task"] = TaskSpec(**task)
    for name in _CONFIG_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = TaskSpec(args.task, args.length if args.length is not None else 8, args.k_max, args.seed)
    save_dataset(args.out, spec, generate(spec, args.n))
    log.info("wrote %d samples to %s", args.n, args.out)
    return EXIT_OK


def _load_split(config: TrainConfig, data_path: str | None):
    if data_path is None:
        return make_data(config)
    spec, samples = load_dataset(data_path)
    frac = config.n_train / (config.n_train + config.n_eval)
    train_set, eval_set = split(samples, frac, spec.seed)
    return train_set, eval_set


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from(args, _read_json(args.config) if args.config else None)
    if args.data:
        spec, _ = load_dataset(args.data)
        config = replace(config, task=spec)
    out = _out_dir(args.out_dir)
    config = replace(config, checkpoint=str(out / "checkpoint.bin"))
    data = _load_split(config, args.data)
    _, metrics = train_model(config, data)
    run = [SweepRun(config.method, config.tau, config.seed, metrics)]
    write_metrics_csv(out / "metrics.csv", run)
    write_histogram_csv(out / "histogram.csv", run)
    write_summary_json(out / "summary.json", {
        "command": "train",
        "config": config.to_dict(),
        "data": args.data,
        "best_epoch": metrics.best_epoch,
        "best_accuracy": metrics.best_accuracy,
        "steps_at_best": metrics.steps_at_best,
        "rho_at_best": metrics.rho_at_best,
        "spearman_at_best": metrics.spearman_at_best,
    })
    print(f"best epoch {metrics.best_epoch}: accuracy {metrics.best_accuracy:.4f}, "
          f"mean steps {metrics.steps_at_best:.3f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    params, meta = ParamStore.load(args.checkpoint)
    config = TrainConfig.from_dict(meta["config"])
    if args.method:
        config = replace(config, method=args.method)
    if args.data:
        _, samples = load_dataset(args.data)
    else:
        _, samples = make_data(config)
    out = _out_dir(args.out_dir)
    ev = evaluate_model(params, samples, config.method, config.N, args.mode, config.epsilon,
                        audit=True, records=True)
    write_csv(out / "histogram.csv", HISTOGRAM_COLUMNS, [
        (config.method, config.tau, config.seed, h.complexity, h.mean_steps, h.n_samples, h.accuracy)
        for h in ev.histogram
    ])
    write_records_jsonl(out / "records.jsonl", ev.records)
    write_summary_json(out / "summary.json", {
        "command": "eval", "config": config.to_dict(), "checkpoint_epoch": meta.get("epoch"),
        "data": args.data, "mode": args.mode, **ev.summary(),
    })
    print(f"accuracy {ev.accuracy:.4f}, mean steps {ev.mean_steps:.3f}, spearman {ev.spearman:.3f}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    doc = _read_json(args.config) if args.config else {}
    unknown = set(doc) - {"base", "taus", "seeds", "methods"}
    if unknown:
        raise UsageError(f"unknown sweep keys: {sorted(unknown)}")
    base = _config_from(args, doc.get("base"))
    taus = args.taus if args.taus is not None else doc.get("taus", list(DEFAULT_TAUS))
    seeds = args.seeds if args.seeds is not None else doc.get("seeds", list(DEFAULT_SEEDS))
    methods = args.methods if args.methods is not None else doc.get("methods", ["dact"])
    bad = set(methods) - set(METHODS)
    if bad:
        raise UsageError(f"unknown methods {sorted(bad)}")
    out = _out_dir(args.out_dir)
    runs = sweep(base, taus, seeds, methods, jobs=args.jobs)
    write_metrics_csv(out / "metrics.csv", runs)
    write_histogram_csv(out / "histogram.csv", runs)
    summary = sweep_summary(base, taus, seeds, methods, runs)
    summary["command"] = "sweep"
    write_summary_json(out / "summary.json", summary)
    for row in summary["per_tau"]:
        print(f"{row['method']:>5} tau={row['tau']:<8g} acc={row['accuracy']:.4f} "
              f"steps={row['mean_steps']:.3f} spearman={row['spearman']:.3f} (n={row['n_runs']})")
    errors = [r for r in runs if r.error]
    for r in errors:
        log.error("%s tau=%g seed=%d failed: %s", r.method, r.tau, r.seed, r.error)
    if any(r.error.startswith(("NonFiniteError", "FloatingPointError")) for r in errors):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    reports = run_suite(args.suite, seed=args.seed, quick=args.quick)
    for r in reports:
        print(r.summary())
    if args.out:
        Path(args.out).write_text(reports_json(reports) + "\n")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VIOLATION


def cmd_export_plot_data(args: argparse.Namespace) -> int:
    """Melt histogram CSVs into ``source,method,tau,seed,complexity,metric,value``."""
    metrics = ("mean_steps", "n_samples", "accuracy")
    with open(args.out, "w", newline="") as out_fh:
        w = csv.writer(out_fh, lineterminator="\n")
        w.writerow(("source", "method", "tau", "seed", "complexity", "metric", "value"))
        for path in args.inputs:
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                if tuple(reader.fieldnames or ()) != HISTOGRAM_COLUMNS:
                    raise UsageError(f"{path}: not a histogram CSV (columns {reader.fieldnames})")
                for row in reader:
                    for m in metrics:
                        w.writerow((path, row["method"], row["tau"], row["seed"], row["complexity"], m, row[m]))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    version = f"adapthalt {__version__}\ncheckpoint format: {CHECKPOINT_MAGIC}\ndataset format: {DATASET_FORMAT}"
    parser = _Parser(prog="adapthalt", description="Adaptive halting experiments: data, training, sweeps, audits.",
                     formatter_class=argparse.RawTextHelpFormatter)
    parser.add_argument("--version", action="version", version=version)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as JSON lines")
    p.add_argument("--task", choices=KINDS, default="prefix_parity")
    p.add_argument("--length", type=int)
    p.add_argument("--k-max", type=int, default=8)
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset file; split by n_train:n_eval (default: generate)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file (default: regenerate the eval split)")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--mode", choices=("halting", "full"), default="halting")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train every (method, tau, seed)")
    _add_config_flags(p, with_method=False)
    p.add_argument("--taus", type=float, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the brute-force audits")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="one tenth of the trials")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-plot-data", help="join histogram CSVs into one long table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plot_data)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"adapthalt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"adapthalt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SoundnessError as exc:
        print(f"adapthalt: halting soundness violated: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"adapthalt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"adapthalt: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
