from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError

from .config import ExperimentConfig, parse_config
from .datasets import DatasetStore
from .errors import (
    ConfigFileError,
    ContinualReprError,
    MissingRunError,
    NotDivisibleError,
    RunFailedError,
    UnknownDatasetError,
)
from .figures import emit_figures
from .report import (
    compare_runs,
    final_value,
    load_manifest,
    report_of,
    table1_schema,
    table_report,
    write_report,
)
from .runner import run
from .utils import resolve_device

logger = logging.getLogger("continual_repr")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_STANDARD_ATTRS = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}


class KeyValueFormatter(logging.Formatter):
    """Appends `extra={...}` fields to the message as key=value pairs."""

    def format(self, record: logging.LogRecord) -> str:
        base = super().format(record)
        extras = {k: v for k, v in vars(record).items() if k not in _STANDARD_ATTRS}
        if not extras:
            return base
        return base + " " + " ".join(f"{k}={v}" for k, v in sorted(extras.items()))


def setup_logging(level: str | None = None) -> None:
    level = (level or os.environ.get("CONTINUAL_REPR_LOG_LEVEL", "INFO")).upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def parse_overrides(pairs: Sequence[str]) -> dict[str, Any]:
    """`a.b=value` pairs into a nested mapping; values are parsed as YAML scalars."""
    out: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigFileError(f"override must look like key=value: {pair!r}")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = parse_overrides(args.set or [])
    for flag in ("name", "sequence", "profile", "output_dir", "device", "workers", "dataset_root"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[flag] = value
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    return parse_config(args.config, overrides=overrides)


def cmd_validate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    sequence = config.build_sequence()
    print(
        json.dumps(
            {
                "name": config.name,
                "sequence": sequence.notation,
                "n_tasks": sequence.n_tasks,
                "objective": config.objective.name,
                "strategy": config.strategy.name,
                "seeds": config.seeds,
                "config_hash": config.config_hash(),
            },
            indent=2,
        )
    )
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    manifest = run(config)
    report = report_of(manifest)
    agg = final_value(report)
    print(f"{config.name}: final task-agnostic k-NN {agg.mean:.1f}±{agg.std:.1f} ({agg.n} seeds)")
    print(f"manifest: {Path(config.output_dir) / config.name / 'manifest.json'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    mine = load_manifest(args.run)
    reference = load_manifest(args.reference)
    store = DatasetStore(args.dataset_root)
    options = ExperimentConfig.model_validate(mine.config).resolved_eval()
    comparison = compare_runs(
        mine,
        reference,
        relation=args.relation,
        probe=args.probe,
        store=store,
        options=options,
        device=resolve_device(args.device),
    )
    if args.out:
        write_report(comparison, args.out)
    for agg in comparison.aggregates:
        print(f"{agg.metric} [{agg.probe}]: {agg.mean:.2f}±{agg.std:.2f} (n={agg.n})")
    return EXIT_OK


def cmd_figures(args: argparse.Namespace) -> int:
    manifests = [load_manifest(p) for p in args.manifests]
    for path in emit_figures(manifests, args.out, kinds=args.kind or None):
        print(path)
    return EXIT_OK


def cmd_table(args: argparse.Namespace) -> int:
    reports = []
    for p in args.manifests:
        try:
            reports.append(report_of(load_manifest(p)))
        except MissingRunError as e:
            logger.warning("table_run_missing", extra={"manifest": p, "error": str(e)})
    schema = table1_schema() if args.schema == "table1" else None
    text = table_report(reports, schema)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="YAML or JSON experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--name")
    p.add_argument("--sequence", help='e.g. "C100/5" or "C10->SVHN"')
    p.add_argument("--profile", choices=["full", "desk", "custom"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--dataset-root", dest="dataset_root")
    p.add_argument("--device")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="continual-repr", description="Continual representation learning runs"
    )
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate every seed of an experiment")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a config without running it")
    _add_config_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("eval", help="compare the final models of two runs on a probe dataset")
    p.add_argument("run", help="manifest (or experiment directory) of the run")
    p.add_argument("--reference", required=True, help="manifest of the reference run")
    p.add_argument("--relation", choices=["exclusion", "transfer", "none"], default="none")
    p.add_argument("--probe", required=True, help="dataset name, e.g. C10")
    p.add_argument("--dataset-root", dest="dataset_root")
    p.add_argument("--device", default="auto")
    p.add_argument("--out", help="write the comparison report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("figures", help="plot accumulation curves, spectra and NMC bars")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", action="append", choices=["knn", "spectra", "nmc", "summary"])
    p.set_defaults(func=cmd_figures)

    p = sub.add_parser("table", help="markdown table of final k-NN accuracy")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--schema", choices=["auto", "table1"], default="auto")
    p.add_argument("--out")
    p.set_defaults(func=cmd_table)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except (ValidationError, ConfigFileError, UnknownDatasetError, NotDivisibleError) as e:
        print(f"invalid configuration:\n{e}", file=sys.stderr)
        return EXIT_VALIDATION
    except RunFailedError as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ContinualReprError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        logger.exception("unexpected_failure")
        print(f"unexpected failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
