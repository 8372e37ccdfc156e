import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from ..core.config import settings
from ..core.errors import ConfigError, DeepCAError
from ..schemas.experiment import ExperimentConfig
from ..schemas.reports import ErrorResponse
from ..services.experiments import COMMANDS

logger = logging.getLogger(__name__)

error_mapping = {
    'TOLERANCE_ERROR': 1,
    'USAGE_ERROR': 2,
    'CONFIG_ERROR': 3,
    'FORMAT_ERROR': 4,
    'DIMENSION_ERROR': 5,
    'CAPACITY_ERROR': 6,
    'NUMERICAL_ERROR': 7,
    'DIVERGENCE_ERROR': 8,
    'IO_ERROR': 74,
    'INTERNAL_ERROR': 70,
}


def load_config(path: Optional[str], seed: Optional[int] = None, iters: Optional[int] = None) -> ExperimentConfig:
    """Read and validate an experiment document; ``seed``/``iters`` override data.seed and run.T."""
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    try:
        cfg = ExperimentConfig.model_validate(document)
        if seed is not None:
            cfg.data = cfg.data.model_copy(update={"seed": seed})
        if iters is not None:
            cfg.run = cfg.run.model_copy(update={"T": [iters]})
            cfg.train = cfg.train.model_copy(update={"T": iters})
        return ExperimentConfig.model_validate(cfg.model_dump())
    except ValidationError as e:
        raise ConfigError(f"{path or '<defaults>'}: {e}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.PROJECT_NAME, description="Deep component analysis experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="JSON experiment document")
        cmd.add_argument("--out", help="run directory (defaults to run.out/<command>)")
        cmd.add_argument("--seed", type=int, help="override data.seed")
        cmd.add_argument("--iters", type=int, help="override the iteration count T")
    return parser


def report_error(code: str, message: str) -> int:
    exit_code = error_mapping.get(code, error_mapping['INTERNAL_ERROR'])
    response = ErrorResponse(error=code, message=message, exit_code=exit_code)
    print(response.model_dump_json(), file=sys.stderr)
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be a non-negative integer")
        if args.iters is not None and args.iters < 1:
            raise ConfigError("--iters must be >= 1")
        cfg = load_config(args.config, args.seed, args.iters)
        out = Path(args.out) if args.out else Path(cfg.run.out) / args.command
        logger.info(f"running {args.command} into {out}")
        summary = COMMANDS[args.command](cfg, out)
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))
        return 0
    except DeepCAError as e:
        logger.error(f"{args.command} failed: {e.message}")
        return report_error(e.code, e.message)
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return report_error('IO_ERROR', str(e))
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}")
        return report_error('INTERNAL_ERROR', f"{type(e).__name__}: {e}")
