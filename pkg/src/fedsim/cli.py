"""Command line entry point: ``fedsim run|compare|lineage|validate``.

Exit codes: 0 success, 1 parse error (scenario or command line), 2 validation
error / missing input / unknown version, 3 runtime invariant violation or
co-versioning chain failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from fedsim.errors import (
    ChainIntegrityError,
    DecodeError,
    FedSimError,
    NotFoundError,
    ScenarioParseError,
    ScenarioValidationError,
)

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

COMPARE_FIELDS = (
    "final_loss",
    "final_accuracy",
    "total_bytes_up",
    "total_bytes_down",
    "total_virtual_time_ms",
    "rounds_completed",
    "rounds_to_convergence",
    "total_dropouts",
)

log = logging.getLogger("fedsim")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def _configure_logging() -> None:
    raw = os.environ.get("FEDSIM_LOG", "error").strip().lower()
    level = LOG_LEVELS.get(raw)
    logging.basicConfig(level=level or logging.ERROR, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level is None:
        log.error("ignoring FEDSIM_LOG=%r; expected one of %s", raw, ", ".join(LOG_LEVELS))


def _fail(code: int, message: str) -> int:
    print(f"fedsim: {message}", file=sys.stderr)
    return code


def _load(path: str):
    from fedsim.simulator.scenario import load_scenario

    return load_scenario(path)


def _scenario_error(exc: Exception) -> int:
    if isinstance(exc, ScenarioParseError):
        return _fail(EXIT_PARSE, f"parse error: {exc}")
    lines = "\n".join(f"  {path}: {msg}" for path, msg in exc.problems)
    return _fail(EXIT_VALIDATION, f"invalid scenario:\n{lines}")


def cmd_validate(args) -> int:
    try:
        scenario = _load(args.scenario)
    except (ScenarioParseError, ScenarioValidationError) as exc:
        return _scenario_error(exc)
    print(f"ok: {scenario.name} ({scenario.aggregator.kind}, {scenario.data.n_clients} clients, {scenario.rounds} rounds)")
    return EXIT_OK


def cmd_run(args) -> int:
    from fedsim.simulator.engine import run_scenario

    try:
        scenario = _load(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_seed(args.seed)
    except (ScenarioParseError, ScenarioValidationError) as exc:
        return _scenario_error(exc)
    log.info("running %s with seed %d", scenario.name, scenario.seed)
    try:
        result = run_scenario(scenario)
    except FedSimError as exc:
        return _fail(EXIT_RUNTIME, f"run aborted: {type(exc).__name__}: {exc}")
    paths = result.write(args.out)
    s = result.summary
    print(
        f"{scenario.name}: {s['rounds_completed']} rounds, final loss {s['final_loss']}, "
        f"{s['total_bytes_up']} bytes up, {s['global_records']} global versions -> {args.out}"
    )
    for p in paths.values():
        log.debug("wrote %s", p)
    return EXIT_OK


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _delta(a, b):
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return b - a
    return None


def compare_summaries(runs: list[tuple[str, dict]]) -> dict:
    """Side-by-side table with deltas against the first run."""
    base = runs[0][1]
    table = {"runs": [name for name, _ in runs], "fields": {}}
    for f in COMPARE_FIELDS:
        table["fields"][f] = {
            "values": [s.get(f) for _, s in runs],
            "delta_vs_first": [_delta(base.get(f), s.get(f)) for _, s in runs],
        }
    return table


def render_table(table: dict) -> str:
    names = table["runs"]
    width = max(12, *(len(n) for n in names))
    head = f"{'metric':<24}" + "".join(f"{n:>{width + 2}}" for n in names)
    rows = [head, "-" * len(head)]
    for f, cols in table["fields"].items():
        rows.append(f"{f:<24}" + "".join(f"{_fmt(v):>{width + 2}}" for v in cols["values"]))
        deltas = cols["delta_vs_first"][1:]
        if deltas:
            rows.append(f"{'  delta':<24}" + " " * (width + 2) + "".join(f"{_fmt(d):>{width + 2}}" for d in deltas))
    return "\n".join(rows)


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        return _fail(EXIT_VALIDATION, "compare needs at least two run directories")
    runs = []
    for d in args.runs:
        path = Path(d) / "summary.json"
        try:
            runs.append((str(d), json.loads(path.read_text(encoding="utf-8"))))
        except FileNotFoundError:
            return _fail(EXIT_VALIDATION, f"missing {path}")
        except (OSError, json.JSONDecodeError) as exc:
            return _fail(EXIT_VALIDATION, f"unreadable {path}: {exc}")
    table = compare_summaries(runs)
    if args.json:
        print(json.dumps(table, indent=2, sort_keys=True))
    else:
        print(render_table(table))
    return EXIT_OK


def cmd_lineage(args) -> int:
    from fedsim.model_mgmt.coversion import CoVersionRegistry

    path = Path(args.out) / "coversion.log"
    if not path.exists():
        return _fail(EXIT_VALIDATION, f"missing {path}")
    try:
        registry = CoVersionRegistry.load(path, verify=True)
    except ChainIntegrityError as exc:
        return _fail(EXIT_RUNTIME, f"co-versioning chain broken at record {exc.index}: {exc}")
    except DecodeError as exc:
        return _fail(EXIT_RUNTIME, f"co-versioning log unreadable: {exc}")
    if args.version == 0 and args.version not in registry.versions():
        print("version 0 (initial model): no contributors")
        return EXIT_OK
    try:
        rec = registry.get(args.version)
    except NotFoundError:
        return _fail(EXIT_VALIDATION, f"version not found: {args.version}")
    if args.json:
        rows = [{"client_id": c, "local_version": v, "digest": d.hex()} for c, v, d in rec.contributing]
        print(json.dumps({"global_version": rec.global_version, "contributors": rows}, indent=2))
        return EXIT_OK
    print(f"global version {rec.global_version}: {len(rec.contributing)} contributors")
    for c, v, d in rec.contributing:
        print(f"{c}\t{v}\t{d.hex()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedsim", description="Federated-learning pattern simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario and write metrics, co-versioning log and summary")
    run.add_argument("--scenario", required=True)
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", required=True, help="output directory")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="compare completed runs side by side")
    cmp_.add_argument("--runs", nargs="+", required=True)
    cmp_.add_argument("--json", action="store_true", help="print the table as JSON")
    cmp_.set_defaults(func=cmd_compare)

    lin = sub.add_parser("lineage", help="list the local models behind a global version")
    lin.add_argument("--out", required=True, help="run directory holding coversion.log")
    lin.add_argument("--version", type=int, required=True)
    lin.add_argument("--json", action="store_true")
    lin.set_defaults(func=cmd_lineage)

    val = sub.add_parser("validate", help="parse and validate a scenario file")
    val.add_argument("--scenario", required=True)
    val.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
