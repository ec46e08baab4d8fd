"""Command line: ``skelmgr run`` and ``skelmgr replay``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import ScenarioError, SkelmgrError
from .scenario import Scenario
from .session import run_scenario

EXIT_OK, EXIT_INVALID, EXIT_UNCONVERGED = 0, 1, 2

METRIC_COLUMNS = ["time", "throughput", "degree", "ssl_arcs", "power_committed"]


def write_outputs(result, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.jsonl").write_text("".join(line + "\n" for line in result.trace_lines()))
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(result.metrics)
    (out / "graph_final.json").write_text(result.graph.dumps() + "\n")
    (out / "verdict.json").write_text(json.dumps(result.verdict, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    try:
        scenario = Scenario.load(args.scenario)
        result = run_scenario(scenario, args.seed, args.mode)
    except (ScenarioError, SkelmgrError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    write_outputs(result, Path(args.out))
    v = result.verdict
    print(f"converged={v['converged']} final_throughput={v['final_throughput']:.3f} "
          f"contracts={v['contracts_satisfied']}")
    return EXIT_OK if v["converged"] else EXIT_UNCONVERGED


def _header(lines: list[str]) -> dict:
    for line in lines:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            continue
        if rec.get("ev") == "header":
            return rec.get("detail", {})
    return {}


def cmd_replay(args) -> int:
    try:
        recorded = Path(args.trace).read_text().splitlines()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    header = _header(recorded)
    seed = args.seed if args.seed is not None else header.get("seed")
    mode = args.mode or header.get("mode")
    try:
        scenario = Scenario.load(args.scenario)
        fresh = run_scenario(scenario, seed, mode).trace_lines()
    except (ScenarioError, SkelmgrError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for i, (old, new) in enumerate(zip(recorded, fresh), start=1):
        if old != new:
            print(f"trace differs at line {i}:\n  recorded: {old}\n  replayed: {new}")
            return EXIT_INVALID
    if len(recorded) != len(fresh):
        line = min(len(recorded), len(fresh)) + 1
        print(f"trace differs at line {line}: recorded {len(recorded)} lines, replayed {len(fresh)}")
        return EXIT_INVALID
    print(f"replay identical ({len(fresh)} lines)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skelmgr", description="Multi-concern skeleton manager simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and write trace, metrics, final graph and verdict")
    run.add_argument("scenario")
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--mode", choices=["sm", "cm"])
    run.set_defaults(func=cmd_run)
    replay = sub.add_parser("replay", help="re-run a scenario and compare with a recorded trace")
    replay.add_argument("trace")
    replay.add_argument("scenario")
    replay.add_argument("--seed", type=int, help="override the seed recorded in the trace")
    replay.add_argument("--mode", choices=["sm", "cm"])
    replay.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
