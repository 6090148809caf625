"""Command-line entry point: train, prune, finetune, run-all, report.

Every command works on a run directory holding the resolved ``config.toml``,
stage checkpoints and CSV reports.  Exit codes: 0 success, 1 config error,
2 runtime failure, 3 collapse detected in the pruning plan.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import traceback
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .checkpoint import export_descriptor, load_checkpoint, save_checkpoint
from .train import (ConfigError, TrainConfig, build_model, evaluate, finetune_stage3, load_splits, prune_stage,
                    train_stage1_sparsity)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_COLLAPSE = 0, 1, 2, 3

# header rows of every CSV the CLI writes
SCHEMAS = {
    "train_report.csv": ["epoch", "lr", "lambda", "train_loss", "train_acc", "val_acc", "sparsity"],
    "finetune_report.csv": ["epoch", "lr", "lambda", "train_loss", "train_acc", "val_acc", "sparsity"],
    "controller.csv": ["epoch", "lambda", "sparsity"],
    "importance.csv": ["layer", "channel", "gamma", "weight_norm", "score"],
    "distribution.csv": ["layer", "channels", "kept", "feature_selection"],
    "comparison.csv": ["run", "rule", "importance", "ratio", "acc_before_prune", "acc_after_prune",
                       "acc_after_finetune", "sparsity", "params", "flops", "min_channels", "collapsed"],
    "distributions.csv": ["run", "layer", "channels", "kept"],
    "trajectories.csv": ["run", "epoch", "lambda", "sparsity"],
}

log = logging.getLogger("depprune")


class RunError(RuntimeError):
    pass


class CollapseDetected(RuntimeError):
    pass


# ---------------------------------------------------------------- config

def parse_overrides(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _flatten(d: dict) -> dict:
    flat = {}
    for k, v in d.items():
        if isinstance(v, dict):
            for k2, v2 in _flatten(v).items():
                if k2 in flat:
                    raise ConfigError(f"config key {k2!r} given twice")
                flat[k2] = v2
        else:
            if k in flat:
                raise ConfigError(f"config key {k!r} given twice")
            flat[k] = v
    return flat


ALIASES = {"ratio": "r", "threshold": "p"}


def resolve_config(path: Optional[str], overrides: dict) -> TrainConfig:
    """Defaults, then the TOML file (sections are flattened), then ``--set`` overrides."""
    values: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                values = _flatten(tomllib.load(fh))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update(overrides)
    values = {ALIASES.get(k, k): v for k, v in values.items()}
    return TrainConfig.from_dict(values)


def write_config(cfg: TrainConfig, run: Path):
    (run / "config.toml").write_text(tomli_w.dumps(cfg.to_dict()))


def read_run_config(run: Path, overrides: dict) -> TrainConfig:
    path = run / "config.toml"
    if not path.exists():
        raise RunError(f"missing artifact: {path}")
    return resolve_config(str(path), overrides)


# ---------------------------------------------------------------- run dirs

@contextmanager
def run_lock(run: Path):
    run.mkdir(parents=True, exist_ok=True)
    lock = run / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(f"run directory {run} is locked by another writer ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _summary(run: Path) -> dict:
    p = run / "summary.json"
    return json.loads(p.read_text()) if p.exists() else {}


def _update_summary(run: Path, drop=(), **kw):
    s = _summary(run)
    for k in drop:
        s.pop(k, None)
    s.update(kw)
    (run / "summary.json").write_text(json.dumps(s, indent=2, sort_keys=True))


def _require(path: Path) -> Path:
    if not path.exists():
        raise RunError(f"missing artifact: {path}")
    return path


# ---------------------------------------------------------------- stages

def do_train(cfg: TrainConfig, run: Path, splits=None) -> None:
    splits = splits or load_splits(cfg)
    write_config(cfg, run)
    graph = build_model(cfg, splits["train"].shape)
    graph, state, report = train_stage1_sparsity(graph, cfg, splits)
    save_checkpoint(graph, run / "train.pkpt")
    report.checkpoint = str(run / "train.pkpt")
    (run / "train_report.csv").write_text(report.to_csv())
    (run / "controller.csv").write_text(state.to_csv())
    (run / "architecture.json").write_text(export_descriptor(graph))
    final = report.epochs[-1]["sparsity"] if report.epochs else 0.0
    _update_summary(run, acc_before_prune=evaluate(graph, splits["test"]), final_sparsity=final,
                    lambda_final=state.lam, ratio=cfg.r)


def do_prune(cfg: TrainConfig, run: Path, splits=None) -> bool:
    splits = splits or load_splits(cfg)
    write_config(cfg, run)
    graph = load_checkpoint(_require(run / "train.pkpt"))
    pruned, plan, transcript, table = prune_stage(graph, cfg)
    save_checkpoint(pruned, run / "pruned.pkpt")
    (run / "plan.json").write_text(plan.to_text())
    (run / "transcript.json").write_text(transcript.to_text())
    (run / "importance.csv").write_text(table.to_csv())
    (run / "distribution.csv").write_text(transcript.distribution_csv())
    # a new plan invalidates any earlier finetune result
    (run / "finetune.pkpt").unlink(missing_ok=True)
    _update_summary(run, drop=("acc_after_finetune", "scratch"), acc_after_prune=evaluate(pruned, splits["test"]), rule=cfg.rule,
                    importance=cfg.importance, params_before=transcript.before[0],
                    flops_before=transcript.before[1], params=transcript.after[0], flops=transcript.after[1],
                    min_channels=0 if plan.collapsed else plan.min_surviving(),
                    collapsed=list(plan.collapsed), filters_pruned=transcript.filters_pruned)
    return bool(plan.collapsed)


def do_finetune(cfg: TrainConfig, run: Path, splits=None) -> None:
    splits = splits or load_splits(cfg)
    write_config(cfg, run)
    graph = load_checkpoint(_require(run / "pruned.pkpt"))
    graph, report = finetune_stage3(graph, cfg, splits)
    save_checkpoint(graph, run / "finetune.pkpt")
    report.checkpoint = str(run / "finetune.pkpt")
    (run / "finetune_report.csv").write_text(report.to_csv())
    _update_summary(run, acc_after_finetune=evaluate(graph, splits["test"]), scratch=cfg.scratch)


def _stage_command(fn):
    def run_cmd(args) -> int:
        run = Path(args.out)
        if fn is do_train:
            cfg = resolve_config(args.config, parse_overrides(args.set))
        else:
            overrides = parse_overrides(args.set)
            if getattr(args, "rule", None):
                overrides["rule"] = args.rule
                if args.rule == "global" and "importance" not in overrides:
                    overrides["importance"] = "gamma"
            if getattr(args, "scratch", False):
                overrides["scratch"] = "true"
            cfg = read_run_config(run, overrides)
        with _failure_marker(run):
            collapsed = fn(cfg, run)
        return EXIT_COLLAPSE if collapsed else EXIT_OK
    return run_cmd


def cmd_run_all(args) -> int:
    cfg = resolve_config(args.config, parse_overrides(args.set))
    run = Path(args.out)
    with _failure_marker(run):
        splits = load_splits(cfg)
        do_train(cfg, run, splits)
        collapsed = do_prune(cfg, run, splits)
        do_finetune(cfg, run, splits)
    return EXIT_COLLAPSE if collapsed else EXIT_OK


@contextmanager
def _failure_marker(run: Path):
    with run_lock(run):
        (run / "FAILED").unlink(missing_ok=True)
        try:
            yield
        except Exception:
            (run / "FAILED").write_text(traceback.format_exc())
            raise


# ---------------------------------------------------------------- report

def _csv(rows: list[dict], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, header, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row.get(k, "") for k in header})
    return buf.getvalue()


def build_report(runs: list[Path]) -> dict[str, str]:
    """Comparison, filter-distribution and controller-trajectory tables over run dirs."""
    comparison, dists, trajs = [], [], []
    for run in runs:
        summary = json.loads(_require(run / "summary.json").read_text())
        cfg = TrainConfig.from_dict(tomllib.loads(_require(run / "config.toml").read_text()))
        comparison.append({"run": run.name, "rule": cfg.rule, "importance": cfg.importance, "ratio": cfg.r,
                           "acc_before_prune": summary.get("acc_before_prune", ""),
                           "acc_after_prune": summary.get("acc_after_prune", ""),
                           "acc_after_finetune": summary.get("acc_after_finetune", ""),
                           "sparsity": summary.get("final_sparsity", ""),
                           "params": summary.get("params", ""), "flops": summary.get("flops", ""),
                           "min_channels": summary.get("min_channels", ""),
                           "collapsed": int(bool(summary.get("collapsed")))})
        with open(_require(run / "distribution.csv"), newline="") as fh:
            for row in csv.DictReader(fh):
                dists.append({"run": run.name, "layer": row["layer"], "channels": row["channels"],
                              "kept": row["kept"]})
        with open(_require(run / "controller.csv"), newline="") as fh:
            for row in csv.DictReader(fh):
                trajs.append({"run": run.name, **row})
    comparison.sort(key=lambda r: (float(r["ratio"]), r["run"]))
    return {"comparison.csv": _csv(comparison, SCHEMAS["comparison.csv"]),
            "distributions.csv": _csv(dists, SCHEMAS["distributions.csv"]),
            "trajectories.csv": _csv(trajs, SCHEMAS["trajectories.csv"])}


def cmd_report(args) -> int:
    tables = build_report([Path(r) for r in args.compare])
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in tables.items():
            (out / name).write_text(text)
    sys.stdout.write(tables["comparison.csv"])
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("train", help="stage 1: sparsity training with lambda control")
    common(p)
    p.set_defaults(func=_stage_command(do_train))
    p = sub.add_parser("prune", help="stage 2: select and remove filters")
    common(p)
    p.add_argument("--rule", choices=["local", "global"], help="local threshold or global ranking baseline")
    p.set_defaults(func=_stage_command(do_prune))
    p = sub.add_parser("finetune", help="stage 3: finetune (or retrain from scratch) the pruned model")
    common(p)
    p.add_argument("--scratch", action="store_true", help="re-initialize before training")
    p.set_defaults(func=_stage_command(do_finetune))
    p = sub.add_parser("run-all", help="train, prune and finetune")
    common(p)
    p.set_defaults(func=cmd_run_all)
    p = sub.add_parser("report", help="compare completed runs")
    p.add_argument("--compare", nargs="+", required=True, metavar="RUN_DIR")
    p.add_argument("--out", help="directory for the CSV tables")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
