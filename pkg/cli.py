"""
cli.py — QLIP Lab
Command-line entry point.

    python cli.py run [--stages a,b,...] [--force]
    python cli.py train-denoiser | calibrate | train-t2q | train-q2b | sample | evaluate
    python cli.py ablate --axis lambda_bit
    python cli.py report

Every subcommand accepts --config path.toml and dotted overrides such as
--q2b.lambda-bit 1.0 or --sample.batch=4.

Exit codes: 0 success, 2 config error, 3 missing prerequisite or foreign
artifact, 4 numeric failure, 1 anything else the lab raised.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from config import ABLATION_AXES, load_run_config
from errors import ConfigError, QlipError

logger = logging.getLogger("qlip.cli")

STAGE_COMMANDS = ("train-denoiser", "calibrate", "train-t2q", "train-q2b", "sample", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--force", action="store_true", help="re-run stages even when cached")
    common.add_argument("--verbose", action="store_true", help="DEBUG logging")

    parser = argparse.ArgumentParser(prog="qlip", description="Prompt-adaptive quantization lab")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run pipeline stages in order")
    run.add_argument("--stages", help="comma-separated subset of " + ",".join(STAGE_COMMANDS))

    for stage in STAGE_COMMANDS:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")

    abl = sub.add_parser("ablate", parents=[common], help="sweep one axis listed under [ablate]")
    abl.add_argument("--axis", required=True, choices=ABLATION_AXES)

    sub.add_parser("report", parents=[common], help="summarise the evaluate stage")
    return parser


def parse_overrides(extra: Sequence[str]) -> dict:
    """['--q2b.lambda-bit', '1.0', '--sample.batch=4'] → {'q2b.lambda-bit': '1.0', 'sample.batch': '4'}"""
    overrides, i = {}, 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognised argument '{token}'")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override '{token}' needs a value")
            i += 1
            value = extra[i]
        overrides[key] = value
        i += 1
    return overrides


def dispatch(args: argparse.Namespace, overrides: dict) -> None:
    from analytics import emit_report
    from tasks import ablate, evaluate_dir, run_pipeline

    config = load_run_config(args.config, overrides)
    logger.info(f"config hash {config.hash}")

    if args.command == "run":
        stages = args.stages.split(",") if args.stages else None
        run_pipeline(config, stages, force=args.force)
    elif args.command in STAGE_COMMANDS:
        run_pipeline(config, [args.command], force=args.force)
    elif args.command == "ablate":
        path = ablate(config, args.axis, force=args.force)
        print(path)
    elif args.command == "report":
        out = emit_report(evaluate_dir(config))
        print(out["summary.md"])


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )

    try:
        dispatch(args, parse_overrides(extra))
    except QlipError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        logger.debug("traceback", exc_info=True)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
