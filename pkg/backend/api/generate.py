"""
generate-data: render the synthetic gravity video dataset into the container format.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Iterator, List, Optional

from api import EXIT_OK, add_common_arguments, load_lab_config, print_json, run_command
from core.dataset_io import assign_splits, write_dataset
from core.scene import SceneSample, generate_samples

logger = logging.getLogger(__name__)


def _logged(samples: Iterator[SceneSample], total: int) -> Iterator[SceneSample]:
    for i, sample in enumerate(samples, start=1):
        if i % 50 == 0 or i == total:
            logger.info("Generated %d/%d samples", i, total)
        yield sample


def add_arguments(parser: argparse.ArgumentParser) -> None:
    add_common_arguments(parser)
    parser.add_argument("--workers", type=int, default=None, help="process pool size (0 = in-process)")


def run(args: argparse.Namespace) -> int:
    config = load_lab_config(args)
    out = Path(args.out) if args.out else config.paths.data_path
    workers = config.paths.num_workers if args.workers is None else args.workers
    params = config.generator
    manifest = write_dataset(
        _logged(generate_samples(params, workers=workers), params.num_samples),
        out,
        params,
        assign_splits(params.num_samples),
    )
    print_json(
        {
            "dataset": str(out),
            "samples": len(manifest.samples),
            "splits": {k: len(v) for k, v in manifest.splits.items()},
            "seed": params.seed,
        }
    )
    return EXIT_OK


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Generate the synthetic gravity video dataset.")
    add_arguments(parser)
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    return run_command(run, _parse_args(argv))


if __name__ == "__main__":
    raise SystemExit(main())
