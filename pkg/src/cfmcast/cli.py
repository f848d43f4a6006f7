"""Command-line entry point: ``cfmcast run|sweep|preset``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import METHODS, run_experiment, sweep_power, write_results
from .scenario import load_config, preset


def _csv_list(text: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _csv_list(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfmcast", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run methods over Monte Carlo drops")
    run.add_argument("--config", required=True, help="JSON configuration file")
    run.add_argument("--methods", type=_csv_list, default=["best_response"],
                     help=f"comma-separated subset of: {', '.join(METHODS)}")
    run.add_argument("--out", required=True, help="output CSV path")

    sweep = sub.add_parser("sweep", help="repeat a run over BS power levels")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--rho-bs", type=_float_list, required=True,
                       help="comma-separated BS powers in dBm")
    sweep.add_argument("--methods", type=_csv_list, default=["centralized", "centralized_group"])
    sweep.add_argument("--out", required=True)

    pre = sub.add_parser("preset", help="print a named configuration as JSON")
    pre.add_argument("--name", required=True, choices=["desk", "paper"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "preset":
            print(json.dumps(preset(args.name).to_dict(), indent=2, sort_keys=True))
            return 0
        config = load_config(args.config)
        if args.command == "run":
            table = run_experiment(config, args.methods)
        else:
            table = sweep_power(config, args.rho_bs, args.methods)
        write_results(table, args.out)
        for method, rho, drop, message in table.failures:
            print(f"warning: {method} failed on drop {drop} at {rho} dBm: {message}",
                  file=sys.stderr)
        return 0
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
