"""
thermodem - Euler-Lagrange multiphysics engine (command line)
"""
import argparse
import json
import logging
import logging.handlers
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import engine_version as ev
from subsolvers.errors import EXIT_CONFIG_ERROR, EXIT_OK, ConfigurationError, EngineError
from subsolvers.plots import emit_plots
from subsolvers.scenario_config import catalog_names, parse_config, resolve_scenario
from subsolvers.scenarios import load_scenario, run_config


@dataclass
class EngineSettings:
    """Runtime settings of the engine (not of a scenario)"""

    threads: int = 1
    log_dir: str = "logs"
    output_root: str = "runs"
    log_level: str = "INFO"

    @classmethod
    def from_file(cls, path: Optional[str]) -> "EngineSettings":
        settings = cls()
        if not path:
            return settings
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"configuration file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(
                f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}", source=path
            ) from exc
        block = data.get("engine", data) if isinstance(data, dict) else None
        if not isinstance(block, dict):
            raise ConfigurationError("configuration file must hold a JSON object", source=path)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(block) - known)
        if unknown:
            raise ConfigurationError([f"unknown setting '{k}'; known: {', '.join(sorted(known))}" for k in unknown],
                                     source=path)
        for key, value in block.items():
            setattr(settings, key, value)
        if not isinstance(settings.threads, int) or settings.threads < 1:
            raise ConfigurationError(f"threads must be a positive integer, got {settings.threads}", source=path)
        return settings


def setup_logging(log_dir: str, level: str = "INFO") -> logging.Logger:
    """Engine logger with a rotating file handler and, when interactive, the console"""
    logs = Path(log_dir)
    logs.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger("thermodem")
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    file_handler = logging.handlers.RotatingFileHandler(
        logs / "thermodem.log", maxBytes=10 * 1024 * 1024, backupCount=5  # 10MB files, keep 5
    )
    console_handler = logging.StreamHandler()
    formatter = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    file_handler.setFormatter(formatter)
    console_handler.setFormatter(formatter)

    logger.addHandler(file_handler)
    if sys.stdin.isatty():  # Only add console handler if running interactively
        logger.addHandler(console_handler)
    return logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thermodem", description="thermodem - CFD-DEM engine for reacting, melting and drying particle beds"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {ev.ENGINE_VERSION} ({ev.ENGINE_NICKNAME})")
    parser.add_argument("--config", help="Path to engine configuration file (JSON)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a catalog scenario or scenario file")
    run.add_argument("scenario", help="Catalog name or path to a scenario YAML file")
    run.add_argument("--output", help="Run directory (default: <output_root>/<scenario>)")
    run.add_argument("--seed", type=int, help="Override numerics.seed")
    run.add_argument("--dt", type=float, help="Override numerics.dt")
    run.add_argument("--tend", type=float, help="Override numerics.t_end")
    run.add_argument("--threads", type=int, help="Worker threads for particle interiors")

    sub.add_parser("list", help="List catalog scenarios")

    check = sub.add_parser("check", help="Parse and validate a scenario without running it")
    check.add_argument("scenario", help="Catalog name or path to a scenario YAML file")

    plots = sub.add_parser("plots", help="Write plot CSVs and gnuplot scripts for a run directory")
    plots.add_argument("run_dir", help="Run directory holding summary.yaml")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {"numerics.seed": args.seed, "numerics.dt": args.dt, "numerics.t_end": args.tend}


def _cmd_run(args, settings: EngineSettings, logger: logging.Logger) -> int:
    config = load_scenario(args.scenario, _overrides(args))
    threads = args.threads or settings.threads
    output = Path(args.output) if args.output else Path(settings.output_root) / config.name
    result = run_config(config, output, threads=threads)
    status = result.summary.get("status")
    logger.info(f"Scenario '{config.name}' finished with status {status} (exit {result.exit_code})")
    print(f"{config.name}: {status} -> {output}")
    if not result.ok:
        print(f"failure: {result.summary.get('failure')}", file=sys.stderr)
    return result.exit_code


def _cmd_list(args, settings, logger) -> int:
    for name in catalog_names():
        config = parse_config(resolve_scenario(name))
        first = config.description.strip().split("\n")[0] if config.description else ""
        print(f"{name:20s} {config.fluid.mode:8s} {first}")
    return EXIT_OK


def _cmd_check(args, settings, logger) -> int:
    config = parse_config(resolve_scenario(args.scenario))
    print(f"{config.name}: ok ({config.fluid.mode}, {len(config.particles)} particle sets)")
    return EXIT_OK


def _cmd_plots(args, settings, logger) -> int:
    written = emit_plots(args.run_dir)
    for path in written:
        print(path)
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "list": _cmd_list, "check": _cmd_check, "plots": _cmd_plots}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    try:
        settings = EngineSettings.from_file(args.config)
    except ConfigurationError as e:
        print(f"Invalid engine configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    logger = setup_logging(settings.log_dir, "DEBUG" if args.verbose else settings.log_level)
    logger.debug(f"Settings: {asdict(settings)}")

    try:
        return COMMANDS[args.command](args, settings, logger)
    except EngineError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Run interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
