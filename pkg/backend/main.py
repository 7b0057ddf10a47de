"""
Lab command line.

    python main.py generate-data   --preset desk
    python main.py train-savi      --config ../configs/desk.toml
    python main.py train-predictor --savi runs/savi/seed0/savi.pt --variant ours
    python main.py evaluate        --savi ... --ckpt ... --out report.json
    python main.py run-experiment  --experiment baseline
    python main.py report          --inputs a/report.json b/report.json

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration. Failures are
printed on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
from typing import List, Optional

from api import evaluate, experiment, generate, run_command, train

COMMANDS = {
    "generate-data": (generate.add_arguments, generate.run, "Generate the synthetic video dataset"),
    "train-savi": (train.add_savi_arguments, train.run_savi, "Train and freeze the slot backbone"),
    "train-predictor": (train.add_predictor_arguments, train.run_predictor, "Train one rollout variant"),
    "evaluate": (evaluate.add_arguments, evaluate.run, "Score predictor checkpoints"),
    "run-experiment": (experiment.add_run_arguments, experiment.run_suite, "Run an experiment suite end to end"),
    "report": (experiment.add_report_arguments, experiment.run_report, "Merge finished reports into one table"),
}


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="lab", description="Physics-engine-in-the-loop video prediction lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (add_arguments, handler, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        add_arguments(cmd)
        cmd.set_defaults(handler=handler)
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_args(argv)
    return run_command(args.handler, args)


if __name__ == "__main__":
    raise SystemExit(main())
