"""Command-line interface: ``density-adapt <command> [options]``.

Exit codes: 0 success, 2 usage or config error, 3 data error,
4 numerical abort.
"""

import argparse
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Optional

from density_adapt.cli.commands import (
    cmd_adapt,
    cmd_evaluate,
    cmd_gen_toy,
    cmd_refine,
    cmd_refine_train,
    cmd_spr_train,
    cmd_train,
)
from density_adapt.errors import DensityAdaptError
from density_adapt.utils import setup_logger

logger = setup_logger("density_adapt.cli")


def positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return number


def _common_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, default=None, help="YAML or TOML config (default: packaged defaults)")
    parent.add_argument("--seed", type=int, default=None, help="Root seed, overrides train.seed")
    parent.add_argument("--out", type=Path, default=None, help="Output directory")
    parent.add_argument("--force", action="store_true", help="Reuse a non-empty output directory")
    parent.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted config override, e.g. train.max_steps=500 (repeatable)",
    )
    return parent


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per pipeline stage."""
    parser = argparse.ArgumentParser(
        prog="density-adapt",
        description="Crowd density counting with multi-level feature-aware adaptation",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_options()

    gen = sub.add_parser("gen-toy", parents=[common], help="Write toy source/target datasets")
    gen.add_argument("--n", type=positive_int, default=None, help="Images per domain")
    gen.set_defaults(handler=cmd_gen_toy)

    for name, handler, text in (
        ("train", cmd_train, "Source-only counter (no adaptation)"),
        ("spr-train", cmd_spr_train, "Source counter with the pyramid-consistency term"),
        ("adapt", cmd_adapt, "Adversarial source-to-target adaptation"),
    ):
        command = sub.add_parser(name, parents=[common], help=text)
        command.add_argument("--resume", type=Path, default=None, help="Continue from a last.pt archive")
        command.set_defaults(handler=handler)

    refine_train = sub.add_parser("refine-train", parents=[common], help="Train the map refiner")
    refine_train.add_argument("--counter", type=Path, required=True, help="Counter archive (entry G)")
    refine_train.add_argument(
        "--source-counter",
        type=Path,
        default=None,
        help="Counter whose source_test maps train the refiner (default: --counter)",
    )
    refine_train.set_defaults(handler=cmd_refine_train)

    for name, handler, refiner_required, text in (
        ("refine", cmd_refine, True, "Evaluate counter + refiner"),
        ("evaluate", cmd_evaluate, False, "Evaluate a counter"),
    ):
        command = sub.add_parser(name, parents=[common], help=text)
        command.add_argument("--counter", type=Path, required=True, help="Counter archive (entry G)")
        command.add_argument("--refiner", type=Path, required=refiner_required, default=None, help="Refiner archive (entry R)")
        command.add_argument("--per-sample-csv", action="store_true", help="Also write per_sample.csv")
        command.set_defaults(handler=handler)

    return parser


def _set_log_level(level: str) -> None:
    for name in list(logging.root.manager.loggerDict):
        if name.startswith("density_adapt"):
            logging.getLogger(name).setLevel(level.upper())


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map errors to exit codes."""
    args = build_parser().parse_args(argv)
    if args.log_level:
        _set_log_level(args.log_level)
    try:
        return args.handler(args)
    except DensityAdaptError as e:
        logger.error("Command failed", exc_info=True, extra={"command": args.command, "exit_code": e.exit_code})
        return e.exit_code


__all__ = ["build_parser", "main"]
