"""Command-line harness.

One subcommand per pipeline stage plus ``report``.  Flags override the
config file; without a config file the builtin blob benchmark runs.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import ConfigError, DataError
from .experiment import STAGES, ExperimentConfig, run_stage

COMMANDS = STAGES + ("report",)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crq",
        description="Cluster-regularized ternary quantization pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, help=f"run the {command} stage")
        p.add_argument("--config", metavar="PATH", help="JSON experiment config")
        p.add_argument("--seed", type=int, metavar="N", help="master seed override")
        p.add_argument("--out", metavar="DIR", help="output directory override")
        p.add_argument(
            "--lambda",
            dest="lam",
            type=float,
            metavar="F",
            help="regularization coefficient override",
        )
        p.add_argument(
            "--epochs",
            type=int,
            metavar="N",
            help="epoch-count override for the invoked stage",
        )
        p.add_argument(
            "--stage-overrides",
            metavar="S1,S2,...",
            help="comma-separated stage list to run instead of the subcommand",
        )
    return parser


_EPOCH_FIELD = {
    "pretrain": "pretrain_epochs",
    "retrain": "retrain_epochs",
    "finetune": "finetune_epochs",
    "compare": "retrain_epochs",
}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.lam is not None:
        if args.lam < 0:
            raise ConfigError("--lambda must be nonnegative")
        overrides["lam"] = args.lam
    if args.epochs is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs must be nonnegative")
        field = _EPOCH_FIELD.get(args.command)
        if field is None:
            raise ConfigError(f"--epochs does not apply to the {args.command} stage")
        overrides[field] = args.epochs
    return replace(config, **overrides) if overrides else config


def stages_from_args(args: argparse.Namespace) -> list[str]:
    if args.stage_overrides:
        stages = [s.strip() for s in args.stage_overrides.split(",") if s.strip()]
        bad = sorted(set(stages) - set(COMMANDS))
        if bad:
            raise ConfigError(f"unknown stages in --stage-overrides: {', '.join(bad)}")
        ordered = [s for s in STAGES if s in stages]
        if "report" in stages:
            ordered.append("report")
        return ordered
    return [args.command]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        config = config_from_args(args)
        for stage in stages_from_args(args):
            run_stage(config, stage)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # internal invariant violation
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
