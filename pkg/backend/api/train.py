"""
train-savi / train-predictor: the two training stages.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import List, Optional

from api import EXIT_OK, add_common_arguments, load_lab_config, print_json, run_command
from core.config import config_hash, dump_config
from core.dataset_io import read_dataset
from core.evaluation import backbone_gate
from core.savi import load_backbone
from core.training import LatentCache, train_predictor, train_savi
from core.utils import resolve_device

logger = logging.getLogger(__name__)


# ------------------------------
# train-savi
# ------------------------------
def add_savi_arguments(parser: argparse.ArgumentParser) -> None:
    add_common_arguments(parser)
    parser.add_argument("--data", default=None, help="dataset directory (defaults to paths.data_dir)")


def run_savi(args: argparse.Namespace) -> int:
    config = load_lab_config(args)
    reader = read_dataset(args.data or config.paths.data_path)
    out = Path(args.out) if args.out else config.paths.runs_path / "savi" / f"seed{config.savi_train.seed}"
    dump_config(config, out / "config.toml")
    digest = config_hash(config, sections=("generator", "engine", "encoder", "savi_train"))
    model, result = train_savi(
        reader,
        config.encoder,
        config.savi_train,
        out,
        resolve_device(config.paths.device),
        config.paths.num_workers,
        meta={"config_hash": digest},
    )
    print_json(dict(result.to_dict(), parameter_hash=model.parameter_hash(), config_hash=digest))
    return EXIT_OK


# ------------------------------
# train-predictor
# ------------------------------
def add_predictor_arguments(parser: argparse.ArgumentParser) -> None:
    add_common_arguments(parser)
    parser.add_argument("--savi", required=True, help="frozen backbone checkpoint")
    parser.add_argument("--data", default=None, help="dataset directory (defaults to paths.data_dir)")
    parser.add_argument("--variant", default=None, help="overrides rollout.variant")
    parser.add_argument("--skip-gate", action="store_true", help="do not enforce the backbone quality floor")


def run_predictor(args: argparse.Namespace) -> int:
    config = load_lab_config(args, overrides={"rollout": {"variant": args.variant}} if args.variant else None)
    device = resolve_device(config.paths.device)
    reader = read_dataset(args.data or config.paths.data_path)
    encoder = load_backbone(args.savi, device)
    if not args.skip_gate:
        backbone_gate(encoder, reader, "val")

    rc, tc = config.rollout, config.train
    out = Path(args.out) if args.out else config.paths.runs_path / "predictors" / f"{rc.variant}-seed{tc.seed}"
    dump_config(config, out / "config.toml")
    caches = {
        split: LatentCache.build(
            reader, encoder, reader.split(split), rc.context_len, rc.train_horizon,
            with_flow=tc.use_flow_loss, num_workers=config.paths.num_workers,
        )
        for split in ("train", "val")
    }
    digest = config_hash(config)
    model, result = train_predictor(
        caches["train"], caches["val"], encoder, rc, tc, out, device, meta={"config_hash": digest, "savi": str(args.savi)}
    )
    print_json(dict(result.to_dict(), variant=rc.variant, parameter_hash=model.parameter_hash(), config_hash=digest))
    return EXIT_OK


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Train the backbone or a rollout predictor.")
    sub = parser.add_subparsers(dest="stage", required=True)
    add_savi_arguments(sub.add_parser("savi"))
    add_predictor_arguments(sub.add_parser("predictor"))
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_args(argv)
    return run_command(run_savi if args.stage == "savi" else run_predictor, args)


if __name__ == "__main__":
    raise SystemExit(main())
