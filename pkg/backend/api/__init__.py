"""
Command modules behind the CLI subcommands.

Each module exposes ``add_arguments(parser)`` and ``run(args) -> int`` for the
dispatcher in ``main.py``, plus its own ``main(argv)`` so it can run standalone.
Shared here: the common flags, config resolution and error-to-JSON handling.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, Optional

from dotenv import load_dotenv

from core.config import PRESETS, LabConfig, load_config
from core.errors import ConfigValidationError, LabError
from core.utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", default=None, help="TOML file overriding the preset")
    parser.add_argument("--preset", choices=PRESETS, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", "-o", default=None)
    parser.add_argument("--log-level", default=None)


def load_lab_config(args: argparse.Namespace, overrides: Optional[Dict[str, Any]] = None) -> LabConfig:
    return load_config(args.config, preset=args.preset, seed=args.seed, overrides=overrides)


def print_json(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def run_command(handler: Callable[[argparse.Namespace], int], args: argparse.Namespace) -> int:
    """Run a command; any failure becomes one JSON object on stderr and a non-zero exit code."""
    load_dotenv()
    setup_logging((getattr(args, "log_level", None) or os.getenv("LAB_LOG_LEVEL") or "INFO").upper())
    try:
        return handler(args)
    except ConfigValidationError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return EXIT_VALIDATION
    except LabError as exc:
        logger.error("%s: %s", type(exc).__name__, exc.message)
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception("Command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, default=str), file=sys.stderr)
        return EXIT_RUNTIME
