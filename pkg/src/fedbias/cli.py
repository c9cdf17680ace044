"""Command-line front door.

Subcommands:
  run <config.yaml>        execute every sweep cell, write JSONL + manifest
  report <manifest.json>   aggregate final-round metrics into a CSV table
  rec-attack <config.yaml> run the recommender case study, print its report
  partition <config.yaml>  emit the partition plan of the first cell

Exit codes: 0 success, 1 runtime failure, 2 usage or invalid input.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from . import rng
from .config import ExperimentConfig
from .data import partition_noniid
from .engine import run_experiment
from .errors import ConfigError, FedbiasError, ParseError
from .recsys import (
    RecAttackConfig,
    RecStudyConfig,
    report_to_json,
    run_case_study,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
METRICS = ("eod", "dpd", "utility")
GROUP_AXES = ("cell", "rule", "epsilon", "kappa", "alpha", "seed")


def _load_config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except (ConfigError, ParseError) as exc:
        raise UsageError(str(exc)) from None


class UsageError(Exception):
    """Bad invocation or unusable input; mapped to exit code 2."""


def _run_cell(args):
    """Worker: run one sweep cell to its JSONL file. Returns (idx, error)."""
    raw, cell, out_dir = args
    cfg = ExperimentConfig(raw)
    path = os.path.join(out_dir, cell.stem + ".jsonl")
    try:
        plan = cfg.build_plan(cell)
        run_experiment(plan, jsonl_path=path)
        return cell, None
    except FedbiasError as exc:
        return cell, str(exc)


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.seed_offset:
        cfg = cfg.with_seed_offset(args.seed_offset)
    out_dir = cfg.raw["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfg.ensure_dataset_file()

    cells = cfg.cells()
    jobs = [(cfg.raw, cell, out_dir) for cell in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]

    entries = []
    n_failed = 0
    for cell, error in results:
        entries.append({
            "rule": cell.rule,
            "epsilon": cell.epsilon,
            "kappa": cell.kappa,
            "alpha": cell.alpha,
            "seed": cell.seed,
            "path": cell.stem + ".jsonl",
            "status": "error" if error else "ok",
            "error": error,
        })
        if error:
            n_failed += 1
            print(f"cell {cell.stem} failed: {error}", file=sys.stderr)
    manifest = {
        "schema_version": 1,
        "name": cfg.raw["name"],
        "config": cfg.raw,
        "cells": entries,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"{len(cells) - n_failed}/{len(cells)} cells completed -> {out_dir}")
    return 1 if n_failed else 0


def _final_metrics(path):
    last = None
    with open(path) as fh:
        for line in fh:
            if line.strip():
                last = line
    if last is None:
        return None
    return json.loads(last)


def _group_key(entry, axis):
    if axis == "cell":
        return (f"{entry['rule']}_eps{entry['epsilon']:g}"
                f"_kap{entry['kappa']:g}_alp{entry['alpha']:g}")
    return entry[axis]


def cmd_report(args) -> int:
    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read manifest: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"manifest is not valid JSON: {exc}") from None

    base = os.path.dirname(os.path.abspath(args.manifest))
    groups = {}
    gaps = []
    for entry in manifest.get("cells", []):
        label = f"{entry['path']}"
        if entry.get("status") != "ok":
            gaps.append(f"{label} (status {entry.get('status')})")
            continue
        path = os.path.join(base, entry["path"])
        try:
            final = _final_metrics(path)
        except OSError:
            final = None
        if final is None:
            gaps.append(f"{label} (missing or empty)")
            continue
        key = _group_key(entry, args.group_by)
        groups.setdefault(key, []).append(final["fairness"][args.metric])
    for gap in gaps:
        print(f"warning: skipping {gap}", file=sys.stderr)
    if not groups:
        print("no completed cells to report", file=sys.stderr)
        return 1

    lines = [f"{args.group_by},{args.metric}_mean,{args.metric}_std,n"]
    for key in sorted(groups):
        vals = np.asarray(groups[key], dtype=float)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        lines.append(f"{key},{float(vals.mean())!r},{std!r},{len(vals)}")
    table = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    return 0


REC_KEYS = {"seed", "n_users", "n_items", "per_user", "ratings_path",
            "embedding_dim", "train_epochs", "train_lr", "holdout_fraction",
            "top_k", "attack", "output"}
REC_ATTACK_KEYS = {"target_item", "lambda", "c", "eps_mse", "steps",
                   "step_size"}


def _rec_config(path) -> tuple:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh.read()) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config root must be a mapping")
    unknown = sorted(set(data) - REC_KEYS)
    atk = data.get("attack") or {}
    unknown += sorted(f"attack.{k}" for k in set(atk) - REC_ATTACK_KEYS)
    if unknown:
        raise UsageError("unknown config keys: " + ", ".join(unknown))
    if "target_item" not in atk:
        raise UsageError("attack.target_item is required")
    try:
        attack = RecAttackConfig(
            target_item=atk["target_item"],
            lambda_=atk.get("lambda", 0.05),
            c=atk.get("c", 2.0),
            eps_mse=atk.get("eps_mse", 1.0),
            steps=atk.get("steps", 200),
            step_size=atk.get("step_size", 0.05),
        )
        study = RecStudyConfig(
            seed=data.get("seed", 0),
            n_users=data.get("n_users", 500),
            n_items=data.get("n_items", 200),
            per_user=data.get("per_user", 20),
            ratings_path=data.get("ratings_path"),
            embedding_dim=data.get("embedding_dim", 8),
            train_epochs=data.get("train_epochs", 10),
            train_lr=data.get("train_lr", 0.02),
            holdout_fraction=data.get("holdout_fraction", 0.1),
            top_k=data.get("top_k", 10),
            attack=attack,
        )
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return study, data.get("output")


def cmd_rec_attack(args) -> int:
    study, output = _rec_config(args.config)
    report = run_case_study(study)
    text = report_to_json(report)
    if output:
        os.makedirs(os.path.dirname(output) or ".", exist_ok=True)
        with open(output, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_partition(args) -> int:
    cfg = _load_config(args.config)
    if args.seed_offset:
        cfg = cfg.with_seed_offset(args.seed_offset)
    cell = cfg.cells()[0]
    train, _ = cfg.load_data(cell.seed)
    plan = partition_noniid(
        train, cfg.raw["partition"]["n_clients"], cell.alpha,
        rng.substream_seed(cell.seed, "partition"),
        size_exponent=cfg.raw["partition"]["size_exponent"])
    text = plan.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbias",
        description="Federated-learning fairness-attack simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--jobs", type=_positive_int, default=1,
                       help="worker processes across sweep cells")
    p_run.add_argument("--seed-offset", type=int, default=0,
                       help="added to every seed in the config")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="tabulate final-round metrics")
    p_rep.add_argument("manifest")
    p_rep.add_argument("--metric", choices=METRICS, default="eod")
    p_rep.add_argument("--group-by", dest="group_by", choices=GROUP_AXES,
                       default="cell")
    p_rep.add_argument("--out", default=None, help="CSV path (default stdout)")
    p_rep.set_defaults(func=cmd_report)

    p_rec = sub.add_parser("rec-attack", help="recommender bias case study")
    p_rec.add_argument("config")
    p_rec.set_defaults(func=cmd_rec_attack)

    p_part = sub.add_parser("partition", help="emit the partition plan only")
    p_part.add_argument("config")
    p_part.add_argument("--seed-offset", type=int, default=0)
    p_part.add_argument("--out", default=None)
    p_part.set_defaults(func=cmd_partition)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FedbiasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
