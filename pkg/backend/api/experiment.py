"""
run-experiment / report: experiment suites and merged comparison tables.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
from pathlib import Path
from typing import List, Optional

from api import EXIT_OK, EXIT_RUNTIME, add_common_arguments, load_lab_config, print_json, run_command
from core.config import load_config
from core.errors import ConfigValidationError
from core.evaluation import MetricReport
from core.experiments import check_orderings, load_experiment, merge_reports, run_experiment, union_report, write_tables
from core.utils import atomic_write_json, ensure_dir

logger = logging.getLogger(__name__)


# ------------------------------
# run-experiment
# ------------------------------
def add_run_arguments(parser: argparse.ArgumentParser) -> None:
    add_common_arguments(parser)
    parser.add_argument(
        "--experiment", "-e", required=True,
        help="baseline | inaccurate | data_efficiency | joint_latent, or a TOML path",
    )


def run_suite(args: argparse.Namespace) -> int:
    spec = load_experiment(args.experiment)
    config = load_config(args.config, preset=args.preset or spec.preset)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=(args.seed,))
    report = run_experiment(spec, config, args.out)
    failed = {entry: row.errors for entry, row in report.rows.items() if row.errors}
    print_json({"experiment": spec.name, "summary": {k: v.summary() for k, v in report.rows.items()}, "failed": failed})
    return EXIT_RUNTIME if failed else EXIT_OK


# ------------------------------
# report
# ------------------------------
def add_report_arguments(parser: argparse.ArgumentParser) -> None:
    add_common_arguments(parser)
    parser.add_argument("--inputs", "-i", nargs="+", required=True, help="report.json files to merge")
    parser.add_argument("--name", default="merged")


def run_report(args: argparse.Namespace) -> int:
    missing = [path for path in args.inputs if not Path(path).is_file()]
    if missing:
        raise ConfigValidationError("inputs", "report file not found", missing)
    config = load_lab_config(args)
    reports = [MetricReport.load(path) for path in args.inputs]
    out = ensure_dir(args.out or config.paths.runs_path / "reports")
    merged = merge_reports(reports, args.name)
    paths = write_tables(merged, out)
    merged.save(out / f"{args.name}.json")
    orderings = atomic_write_json(out / f"{args.name}_orderings.json", check_orderings(union_report(reports)))
    print_json({"tables": {k: str(v) for k, v in paths.items()}, "orderings": str(orderings), "rows": len(merged.rows)})
    return EXIT_OK


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Run an experiment suite or merge finished reports.")
    sub = parser.add_subparsers(dest="command", required=True)
    add_run_arguments(sub.add_parser("run"))
    add_report_arguments(sub.add_parser("report"))
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_args(argv)
    return run_command(run_suite if args.command == "run" else run_report, args)


if __name__ == "__main__":
    raise SystemExit(main())
