"""Command line entry point: ``simulate``, ``validate`` and ``schema``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from .cluster import InvariantViolation
from .metrics import schema_text
from .scenario import ScenarioError, load_scenario
from .sim_engine import SimulationError, seconds

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_INVARIANT = 3

logger = logging.getLogger("wbcluster")

BUNDLED_DIR = os.path.join(os.path.dirname(__file__), "scenarios")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def bundled_scenarios() -> List[str]:
    return sorted(f[:-4] for f in os.listdir(BUNDLED_DIR) if f.endswith(".scn"))


def resolve(path: str) -> str:
    """A path on disk, or the name of a bundled scenario."""
    if os.path.exists(path):
        return path
    name = os.path.basename(path)
    name = name[:-4] if name.endswith(".scn") else name
    candidate = os.path.join(BUNDLED_DIR, name + ".scn")
    return candidate if os.path.exists(candidate) else path


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wbcluster", description="Clustered wireless backhaul simulator.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sim = sub.add_parser("simulate", help="run a scenario and write CSV metrics")
    sim.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sim.add_argument("--until", type=float, default=None, metavar="SECONDS", help="override the duration")
    val = sub.add_parser("validate", help="parse and check a scenario without running it")
    val.add_argument("scenario")
    sub.add_parser("schema", help="print the CSV schemas")
    sub.add_parser("list", help="list bundled scenarios")
    return p


def cmd_simulate(args) -> int:
    path = resolve(args.scenario)
    try:
        scenario = load_scenario(path)
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.until is not None and args.until <= 0:
        print("--until must be positive", file=sys.stderr)
        return EXIT_USAGE
    until = seconds(args.until) if args.until is not None else scenario.duration
    try:
        cluster = scenario.build(args.seed)
        cluster.run(until)
    except (InvariantViolation, SimulationError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    try:
        paths = cluster.write(args.out, scenario.name)
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for p in paths:
        logger.info("wrote %s", p)
    print(f"{scenario.name}: simulated {until / 1e6:g} s, wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        scenario = load_scenario(resolve(args.scenario))
    except ScenarioError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {scenario.name}: {len(scenario.units)} units, {len(scenario.events)} events, "
          f"duration {scenario.duration / 1e6:g} s")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate":
        return cmd_simulate(args)
    if args.command == "validate":
        return cmd_validate(args)
    if args.command == "schema":
        sys.stdout.write(schema_text())
        return EXIT_OK
    if args.command == "list":
        print("\n".join(bundled_scenarios()))
        return EXIT_OK
    parser.print_usage(sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
