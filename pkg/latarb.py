import argparse
import signal
import sys

from loguru import logger

from config import LOG_FILE, LOG_LEVEL, VERSION, config_hash, load_pipeline_config
from commands import (
    register_analysis_commands,
    register_data_commands,
    register_estimate_commands,
    register_oracle_commands,
)
from commands.analysis import bounds_handler, excess_handler, implied_gamma_handler
from commands.data import ingest_handler
from commands.estimate import latency_handler, vol_handler
from commands.oracle import simulate_handler
from services.errors import ValidationError

# Stage order of `all`
PIPELINE = [
    ("ingest", ingest_handler),
    ("vol", vol_handler),
    ("latency", latency_handler),
    ("bounds", bounds_handler),
    ("excess", excess_handler),
    ("implied-gamma", implied_gamma_handler),
    ("simulate", simulate_handler),
]


def setup_logging(level: str = LOG_LEVEL, log_file: str | None = LOG_FILE) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level)
    if log_file:
        logger.add(log_file, rotation="10 MB", retention=3, level=level)


def _gammas(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {value}")


def run_all(args, cfg) -> int:
    for stage, handler in PIPELINE:
        logger.info(f"Stage {stage}")
        status = handler(args, cfg)
        if status:
            return status
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (TOML or JSON)")
    common.add_argument("--from", dest="date_from", help="first day, YYYY-MM-DD")
    common.add_argument("--to", dest="date_to", help="last day, YYYY-MM-DD")
    common.add_argument("--gamma", dest="gammas", type=_gammas, help="risk aversion grid, e.g. 2,5,10")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", dest="output_dir", help="output directory (default $LATARB_OUT)")
    common.add_argument("--strict", action="store_true", default=None, help="fail on any invalid input row")
    common.add_argument("--allow-lookahead", action="store_true", default=None,
                        help="apply models on their fitting day (diagnostics only)")

    parser = argparse.ArgumentParser(prog="latarb", description="Limits to arbitrage under settlement latency")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_data_commands(subparsers, common)
    register_estimate_commands(subparsers, common)
    register_analysis_commands(subparsers, common)
    register_oracle_commands(subparsers, common)
    subparsers.add_parser("all", parents=[common], help="run every stage in order").set_defaults(handler=run_all)
    return parser


def main(argv=None) -> int:
    """Parse arguments, run one subcommand and map failures to exit codes 1 (input) and 2 (runtime)"""
    args = build_parser().parse_args(argv)
    try:
        cfg = load_pipeline_config(
            args.config,
            date_from=args.date_from,
            date_to=args.date_to,
            gammas=args.gammas,
            seed=args.seed,
            jobs=args.jobs,
            output_dir=args.output_dir,
            strict=args.strict,
            allow_lookahead=args.allow_lookahead,
        )
        logger.info(f"latarb {VERSION}: {args.command}, config {config_hash(cfg)[:12]}, seed {cfg.seed}")
        return args.handler(args, cfg)
    except ValidationError as e:
        logger.error(f"{args.command}: {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 2
    except Exception as e:
        logger.exception(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    setup_logging()
    signal.signal(signal.SIGTERM, lambda signum, frame: sys.exit(2))
    sys.exit(main())
