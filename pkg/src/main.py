"""
Command-line entry point
Runs, sweeps and validates joint beamforming scenarios
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import structlog
from dotenv import load_dotenv
from pydantic import ValidationError as SchemaError
from pythonjsonlogger import jsonlogger

import presets
import runner
import telemetry
from errors import BisacError, ConfigError, InfeasibleError, ValidationError
from models import RuntimeConfig

# Load environment variables
load_dotenv()

# Configure logging
structlog.configure(
    processors=[
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.add_log_level,
        structlog.processors.JSONRenderer()
    ],
    logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
)
logger = structlog.get_logger()

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


def load_config() -> RuntimeConfig:
    """
    Load runtime configuration from environment variables

    Raises:
        ConfigError: naming the variable that does not parse
    """
    raw_workers = os.getenv("BISAC_WORKERS", str(os.cpu_count() or 1))
    try:
        workers = int(raw_workers)
    except ValueError:
        raise ConfigError(f"BISAC_WORKERS: expected an integer, got {raw_workers!r}") from None
    try:
        return RuntimeConfig(workers=workers, log_level=os.getenv("LOG_LEVEL", "INFO").upper())
    except SchemaError as exc:
        names = {"workers": "BISAC_WORKERS", "log_level": "LOG_LEVEL"}
        first = exc.errors()[0]
        key = names.get(str(first["loc"][0]), str(first["loc"][0])) if first["loc"] else "config"
        raise ConfigError(f"{key}: {first['msg']}") from None


def setup_logging(level: str) -> None:
    """Library modules log through stdlib logging; render them as JSON on stderr"""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(jsonlogger.JsonFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


# ==================== Commands ====================

def cmd_run(args: argparse.Namespace, config: RuntimeConfig) -> int:
    scenario = presets.load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.model_copy(update={"seed": args.seed})
    runner.run_scenario(scenario, Path(args.out), trials_override=args.trials)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: RuntimeConfig) -> int:
    scenario = presets.load_scenario(args.scenario)
    if scenario.sweep is None:
        raise ValidationError(f"scenario '{scenario.name}' has no sweep block")
    workers = args.workers or config.workers
    points = runner.run_sweep(scenario, Path(args.out), workers=workers, trials_override=args.trials)
    if points and all(p["status"] != "ok" for p in points):
        return EXIT_INFEASIBLE if all(p["status"] == "infeasible" for p in points) else EXIT_ERROR
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, config: RuntimeConfig) -> int:
    report = presets.validate(args.path)
    print(json.dumps(report.model_dump(), indent=2))
    return EXIT_OK if report.ok else EXIT_ERROR


def cmd_presets(args: argparse.Namespace, config: RuntimeConfig) -> int:
    for name in presets.list_presets():
        scenario = presets.load_scenario(name)
        print(f"{name}\t{scenario.stage}\t{scenario.description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bisac", description="Backscatter ISAC joint beamforming")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Solve one scenario and write its result files")
    run.add_argument("--scenario", required=True, help="Preset name or scenario JSON path")
    run.add_argument("--out", required=True, help="Output directory")
    run.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    run.add_argument("--trials", type=int, default=None, help="Override Monte-Carlo trial counts")
    run.add_argument("--metrics-file", default=None, help="Write Prometheus counters here")
    run.set_defaults(handler=cmd_run)

    sweep = sub.add_parser("sweep", help="Solve every point of the scenario's sweep grid")
    sweep.add_argument("--scenario", required=True)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--workers", type=int, default=None, help="Worker processes (default BISAC_WORKERS)")
    sweep.add_argument("--trials", type=int, default=None,
                       help="Monte-Carlo trials per grid point for the empirical column")
    sweep.add_argument("--metrics-file", default=None)
    sweep.set_defaults(handler=cmd_sweep)

    validate = sub.add_parser("validate", help="Check a scenario file against the schema")
    validate.add_argument("path")
    validate.set_defaults(handler=cmd_validate)

    listing = sub.add_parser("presets", help="List the bundled presets")
    listing.set_defaults(handler=cmd_presets)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config()
    except ConfigError as exc:
        setup_logging("INFO")
        logger.error("Configuration invalid", command=args.command, code=exc.code, error=exc.message)
        print(exc.message, file=sys.stderr)
        return EXIT_ERROR
    setup_logging(config.log_level)

    try:
        code = args.handler(args, config)
    except InfeasibleError as exc:
        logger.error("Problem infeasible", command=args.command, error=exc.message)
        return EXIT_INFEASIBLE
    except BisacError as exc:
        logger.error("Command failed", command=args.command, code=exc.code, error=exc.message)
        print(exc.message, file=sys.stderr)
        return EXIT_ERROR

    metrics_file = getattr(args, "metrics_file", None)
    if metrics_file:
        telemetry.write_metrics(metrics_file)
    return code


# ==================== Main Entry Point ====================

if __name__ == "__main__":
    sys.exit(main())
