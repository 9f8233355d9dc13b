try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

from loguru import logger

from config import PipelineConfig
from services.errors import ValidationError
from services.simulator import LatencyLaw, SimConfig, SimulatorService, SuiteSettings, run_suite
from utils import record_stage, write_csv, write_json

REPORT = "simulate_report.json"
TRACES = "simulate_paths.csv"
DEFAULT_SUITE = Path(__file__).resolve().parent.parent / "data" / "synthetic.toml"


def load_suite(path) -> SuiteSettings:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Simulation config not found: {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"Cannot parse simulation config {path}: {e}") from e
    return SuiteSettings.from_dict(data.get("simulation", data))


def simulate_handler(args, cfg: PipelineConfig) -> int:
    """Run the Monte Carlo acceptance suite and write its report; exit 2 when a check fails"""
    if cfg.jobs < 1:
        raise ValidationError(f"jobs must be at least 1, got {cfg.jobs}")
    settings = load_suite(cfg.simulation or DEFAULT_SUITE)
    service = SimulatorService(jobs=cfg.jobs)
    report = run_suite(service, settings, cfg.seed)

    files = [write_json(cfg.out / REPORT, report)]
    if settings.trace_paths > 0:
        law = LatencyLaw("exponential", rate=settings.rate)
        traces = service.sample_paths(SimConfig(cfg.seed, 1, settings.sigma, law, settings.delta), settings.trace_paths)
        files.append(write_csv(cfg.out / TRACES, traces))
    record_stage(cfg, "simulate", files)

    if report["passed"]:
        logger.info("Simulation checks passed")
    else:
        logger.error(f"Simulation checks failed, see {cfg.out / REPORT}")
        return 2
    return 0


def register_oracle_commands(subparsers, common) -> None:
    parser = subparsers.add_parser("simulate", parents=[common], help="run the Monte Carlo oracle")
    parser.set_defaults(handler=simulate_handler)
