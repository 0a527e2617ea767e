"""Command line entry point, `fracdrift <subcommand> --config PATH`."""

import argparse
import sys
from typing import Callable, Dict, List, Optional

import numpy as np

from prefect_fracdrift._version import __version__
from prefect_fracdrift.config import RunConfig
from prefect_fracdrift.exceptions import ConfigError, FracDriftError
from prefect_fracdrift.flows import (
    checks_flow,
    first_integrals_flow,
    kernel_series_flow,
    mc_flow,
    sweep_flow,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_SOLVER_ERROR = 3

FLOWS: Dict[str, Callable] = {
    "sweep": sweep_flow,
    "checks": checks_flow,
    "mc": mc_flow,
    "kernel-series": kernel_series_flow,
    "first-integrals": first_integrals_flow,
}

#: Failures of a flow that has a valid configuration; ConfigError is caught first.
NUMERICAL_ERRORS = (FracDriftError, np.linalg.LinAlgError)


def build_parser() -> argparse.ArgumentParser:
    """The argument parser; every subcommand takes `--config`, `--out` and `--seed`."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", metavar="PATH", help="flat key = value configuration file"
    )
    common.add_argument("--out", metavar="DIR", help="overrides out.dir")
    common.add_argument("--seed", type=int, metavar="N", help="overrides seed")

    parser = argparse.ArgumentParser(
        prog="fracdrift",
        description=(
            "Principal eigenvalues of the fractional Laplacian with "
            "incompressible drift."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, entry in FLOWS.items():
        summary = (entry.description or "").strip().splitlines()[0]
        subparsers.add_parser(name, parents=[common], help=summary)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """
    Reads the configuration named by `--config` and applies the overrides.

    Raises:
        ConfigError: If the file is unreadable or a value is invalid.
    """
    overrides = {"out.dir": args.out, "seed": args.seed}
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig.from_flat(
        {key: value for key, value in overrides.items() if value is not None}
    )


def main(argv: Optional[List[str]] = None) -> int:
    """
    Runs one subcommand.

    Returns:
        0 on success, 1 when a check failed, 2 on an invalid configuration and
        3 when a numerical stage failed.
    """
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"{args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        result = FLOWS[args.command](config)
    except ConfigError as exc:
        print(f"{args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except NUMERICAL_ERRORS as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_SOLVER_ERROR
    if args.command == "checks" and not result["passed"]:
        failed = [c["name"] for c in result["checks"] if not c["passed"]]
        print(f"checks failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
