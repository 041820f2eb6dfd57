import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from swirs.config.logging import get_logger, setup_logging
from swirs.config.scenario import MODES, load_scenario
from swirs.config.settings import Settings
from swirs.errors import EXIT_CONFIG, EXIT_OK, ConfigError, SwirsError
from swirs.services.scenario_service import RunSummary, ScenarioService

# Initialize logging
logger = get_logger('main')

COMMANDS = MODES + ("calibrate", "schema")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swirs",
        description="Simulate, analyze and optimally control the two-virus SWIRS epidemic model.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", default=None,
                        help="Console log level (defaults to SWIRS_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    for command in MODES:
        cmd = sub.add_parser(command, help=f"Run a scenario in {command} mode",
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        cmd.add_argument("--config", required=True, help="Scenario TOML file")
        cmd.add_argument("--out", default=None, help="Output directory (defaults to SWIRS_OUTPUT_DIR)")
        if command == "sweep":
            cmd.add_argument("--workers", type=int, default=None,
                             help="Worker processes (defaults to SWIRS_WORKERS)")

    cal = sub.add_parser("calibrate", help="Fit the initial seed to a target end value",
                         formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    cal.add_argument("--config", required=True, help="Scenario TOML file")
    cal.add_argument("--out", default=None, help="Output directory (defaults to SWIRS_OUTPUT_DIR)")
    cal.add_argument("--target", type=float, required=True, help="Target value at the final time")
    cal.add_argument("--compartment", default="I2", choices=["S", "W", "I1", "I2", "R"])

    schema = sub.add_parser("schema", help="Write the JSON schema of run summaries")
    schema.add_argument("--out", default="-", help="Output file, '-' for stdout")
    return parser


def _write_schema(target: str) -> int:
    text = json.dumps(RunSummary.model_json_schema(), indent=2)
    if target == "-":
        print(text)
    else:
        Path(target).write_text(text + "\n", encoding="utf-8")
        logger.info(f"Wrote summary schema to {target}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the ``swirs`` command; returns the process exit status."""
    args = build_parser().parse_args(argv)
    try:
        settings = Settings()
        if args.command != "schema":
            settings.ensure_directories()
        setup_logging(settings, level=args.log_level)
    except ConfigError as e:
        print(f"swirs: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "schema":
        return _write_schema(args.out)

    logger.info(f"Command '{args.command}' requested with config {args.config}")
    try:
        cfg = load_scenario(args.config, mode=None if args.command == "calibrate" else args.command)
    except ConfigError as e:
        logger.error(f"Invalid scenario: {e}")
        print(f"swirs: {e}", file=sys.stderr)
        return e.code

    out = args.out or cfg.output.dir or settings.OUTPUT_DIR
    service = ScenarioService()
    if args.command == "calibrate":
        result = service.calibrate(cfg, out, args.target, args.compartment)
    else:
        workers = getattr(args, "workers", None)
        if workers is None:
            workers = settings.WORKERS
        if workers < 1:
            print("swirs: --workers must be at least 1", file=sys.stderr)
            return EXIT_CONFIG
        result = service.run(cfg, out, workers)

    if not result["success"]:
        print(f"swirs: {result['error']}", file=sys.stderr)
        return result.get("code", SwirsError.code)

    summary = result["summary"]
    logger.info(f"Command '{args.command}' finished with status {summary.status}; files in {out}")
    print(summary.model_dump_json(indent=2))
    return result["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
