import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from app.cli.commands import (
    CommandOptions,
    cmd_certify,
    cmd_figures,
    cmd_simulate,
    cmd_track,
    exit_code,
)
from app.config import EXIT_CODES, LOG_FORMAT, LOG_LEVEL, OUTPUT_DIR
from app.services.scenario_service import ConfigError
from app.services.tracking_service import InvalidController

logger = logging.getLogger(__name__)

COMMANDS = {
    "simulate": cmd_simulate,
    "certify": cmd_certify,
    "track": cmd_track,
}


def _override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VAL, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybrid-tracking",
        description="Simulate, certify and track reference trajectories of hybrid systems with state-triggered jumps.",
    )
    parser.add_argument("command", choices=[*COMMANDS, "figures"])
    parser.add_argument(
        "--config",
        help="scenario YAML file, or a bundled scenario name (bouncing_ball, dissipative_oscillator)",
    )
    parser.add_argument("--out", type=Path, default=OUTPUT_DIR, help="output directory (default: %(default)s)")
    parser.add_argument(
        "--tol-override",
        type=_override,
        action="append",
        default=[],
        metavar="KEY=VAL",
        help="override a simulation limit or certificate tolerance; repeatable",
    )
    parser.add_argument("--seed", type=int, help="seed for the guard samplers")
    parser.add_argument("--max-jumps", type=int, help="cap on the number of jumps per run")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="logging level (default: %(default)s)")
    return parser


async def run(args: argparse.Namespace) -> int:
    options = CommandOptions(
        config=args.config,
        out_dir=args.out,
        overrides=dict(args.tol_override),
        seed=args.seed,
        max_jumps=args.max_jumps,
    )
    if args.command == "figures":
        reports = await cmd_figures(options)
    else:
        reports = [await COMMANDS[args.command](options)]
    for report in reports:
        for error in report.errors:
            logger.error("%s: %s", report.scenario, error)
    return exit_code(reports)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format=LOG_FORMAT)

    try:
        return asyncio.run(run(args))
    except (ConfigError, InvalidController) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CODES["config_error"]


if __name__ == "__main__":
    sys.exit(main())
