"""``structnav run`` / ``structnav table`` command line."""

from __future__ import annotations

import argparse
import sys

from pydantic import ValidationError

from .bench import default_scenario, emit_tables, load_report, load_scenario, run_experiment
from .estimator import SelectionRefused


def _parser():
    p = argparse.ArgumentParser(prog="structnav", description="Structure-prior inertial estimation benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte-Carlo strategy comparison")
    run.add_argument("--scenario", help="scenario JSON file (defaults to the built-in scenario)")
    run.add_argument(
        "--strategies",
        required=True,
        help="comma separated, e.g. P_INS,PL_INS,PLP_INS,SPINS_RAND(20),SPINS_ALL",
    )
    run.add_argument("--runs", type=int, default=20, help="Monte-Carlo runs per strategy")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--budget", type=int, help="prior budget for budgeted strategies given without (k)")
    run.add_argument("--sweep", action="store_true", help="also sweep SPINS_APPROX(k) over k in 0,5,10,20,40,all")

    table = sub.add_parser("table", help="print the table of a finished run")
    table.add_argument("--report", required=True, help="output directory of a previous run")
    return p


def _split(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            scenario = load_scenario(args.scenario) if args.scenario else default_scenario()
            report = run_experiment(
                scenario, _split(args.strategies), args.runs, args.out, budget=args.budget, sweep=args.sweep
            )
            print(emit_tables(report), end="")
        else:
            print(emit_tables(load_report(args.report)), end="")
    except SelectionRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
