"""
evaluate: score trained predictor checkpoints (and optionally the backbone) on a split.
"""

from __future__ import annotations

import argparse
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional

from api import EXIT_OK, add_common_arguments, load_lab_config, print_json, run_command
from core.dataset_io import read_dataset
from core.errors import LabError
from core.evaluation import (
    BACKBONE_ROW,
    MetricReport,
    evaluate_backbone,
    evaluate_model,
    export_figures,
    export_sample_grid,
    predict_segmentations,
)
from core.rollout import RolloutModel, load_predictor
from core.savi import load_backbone
from core.utils import resolve_device

logger = logging.getLogger(__name__)

DEFAULT_GRID_STEPS = (1, 6, 12, 18, 24)


def add_arguments(parser: argparse.ArgumentParser) -> None:
    add_common_arguments(parser)
    parser.add_argument("--ckpt", nargs="+", required=True, help="predictor checkpoints (any variants and seeds)")
    parser.add_argument("--savi", required=True, help="frozen backbone checkpoint")
    parser.add_argument("--data", default=None)
    parser.add_argument("--split", default="test")
    parser.add_argument("--horizon", type=int, default=None)
    parser.add_argument("--with-backbone", action="store_true", help="add the backbone upper-bound row")
    parser.add_argument("--figures", default=None, help="directory for curves, CSV and sample grids")
    parser.add_argument("--grid-sample", type=int, default=None, help="sample id for the segmentation grid")
    parser.add_argument("--grid-steps", type=int, nargs="+", default=list(DEFAULT_GRID_STEPS))


def run(args: argparse.Namespace) -> int:
    config = load_lab_config(args)
    device = resolve_device(config.paths.device)
    reader = read_dataset(args.data or config.paths.data_path)
    encoder = load_backbone(args.savi, device)
    horizon = args.horizon or config.rollout.eval_horizon

    by_variant: Dict[str, Dict[int, RolloutModel]] = defaultdict(dict)
    provenance: Dict[str, Dict[int, Dict[str, str]]] = defaultdict(dict)
    for path in args.ckpt:
        model, meta = load_predictor(path, device)
        seed = int(meta.get("train_config", {}).get("seed", 0))
        if seed in by_variant[model.variant]:
            raise LabError("two checkpoints for the same variant and seed", variant=model.variant, seed=seed)
        by_variant[model.variant][seed] = model
        provenance[model.variant][seed] = {"checkpoint": str(path), "config_hash": meta.get("config_hash", "")}

    report = MetricReport(name=Path(args.out).stem if args.out else "evaluation", meta={"split": args.split, "savi": args.savi})
    for variant, models in by_variant.items():
        report.rows[variant] = evaluate_model(models, encoder, reader, args.split, horizon, provenance=provenance[variant])
    if args.with_backbone:
        row = report.row(BACKBONE_ROW)
        row.seeds["0"] = evaluate_backbone(encoder, reader, reader.split(args.split), config.rollout.context_len, horizon)
        row.provenance["0"] = {"checkpoint": str(args.savi)}

    out = Path(args.out) if args.out else config.paths.runs_path / "evaluation" / "report.json"
    report.save(out)
    outputs = {"report": str(out)}
    if args.figures:
        outputs.update({k: str(v) for k, v in export_figures(report, args.figures).items()})
        if args.grid_sample is not None:
            first = {v: models[min(models)] for v, models in by_variant.items()}
            segs = predict_segmentations(first, encoder, reader, args.grid_sample, horizon)
            gt = segs.pop("gt")
            grid = export_sample_grid(gt, segs, args.grid_steps, Path(args.figures) / f"sample_{args.grid_sample}_grid.png")
            outputs["grid"] = str(grid)
    print_json({"outputs": outputs, "summary": {k: v.summary() for k, v in report.rows.items()}})
    return EXIT_OK


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Evaluate predictor checkpoints.")
    add_arguments(parser)
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    return run_command(run, _parse_args(argv))


if __name__ == "__main__":
    raise SystemExit(main())
