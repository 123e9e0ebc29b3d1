"""Command line: ``leaklab <command> [--config PATH] [--seed N] [--out DIR] [--set key=value ...]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error, 5 format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from leaklab.errors import ConfigError, LeakLabError
from leaklab.harness.config import PipelineConfig, apply_overrides, fixture_config
from leaklab.harness.pipeline import COMMANDS, emit_reports, read_json, run_stages

log = logging.getLogger("leaklab")

HELP = {
    "build-data": "write the fine-tune dataset and the pretrain/restore/eval splits",
    "train": "pretrain the base model, then LoRA fine-tune it on the dataset",
    "mine": "mine passwords from the fine-tuned model; association series and PCA",
    "trace": "per-submodule attribution, target selection and restoration check",
    "edit": "merge adapters, apply the scaled rank-one edit, mine again",
    "eval": "benchmark accuracy before/after the edit; restoration fine-tune",
    "sweep": "apply the edit at each configured scale and tabulate the trade-off",
    "run": "every stage in order (skips stages whose outputs exist)",
    "report": "write run_summary.json and validate every report",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: the desk-scale fixture)")
    common.add_argument("--seed", type=int, help="seed for every stochastic step")
    common.add_argument("--out", help="run directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. edit.scale=0.05")
    common.add_argument("--force", action="store_true", help="re-run stages even if their outputs exist")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="leaklab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def load_config(args) -> PipelineConfig:
    if args.config:
        config = PipelineConfig.load(args.config)
    else:
        config = fixture_config()
    overrides = list(args.set)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        overrides += [f"seed={args.seed}", f"model.seed={args.seed}", f"train.seed={args.seed}"]
    if args.out:
        overrides.append(f"out_dir={json.dumps(args.out)}")
    return apply_overrides(config, overrides) if overrides else config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        run = run_stages(config, COMMANDS[args.command], force=args.force)
        if args.command in ("run", "report"):
            emit_reports(run.dir)
            summary = read_json(run.path("run_summary.json"))
            p = summary["passwords"]
            print(
                f"recovered {p['recovered_pre']}/{p['injected']} before edit, {p['recovered_post']} after; "
                f"accuracy {summary['accuracy']['pre_edit']:.3f} -> {summary['accuracy']['post_edit']:.3f}; "
                f"target {summary['edit']['target_path']} at s={summary['edit']['scale']}"
            )
        print(run.dir)
        return 0
    except LeakLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
