import os
import json
import hashlib
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, asdict
from datetime import date
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from services.errors import ValidationError

# Environment settings from .env
load_dotenv()

VERSION = "1.0.0"

OUTPUT_ROOT = os.getenv("LATARB_OUT", "out")
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("LATARB_LOG_FILE", "logs/latarb.log")
DEFAULT_SEED = int(os.getenv("LATARB_SEED", "20190101"))
DEFAULT_JOBS = int(os.getenv("LATARB_JOBS", "1"))

DEFAULT_BANDWIDTHS = [5.0, 10.0, 20.0, 30.0, 60.0, 120.0, 240.0]

# Artifact manifest kept in every output directory
MANIFEST_FILE = "manifest.json"


@dataclass
class PipelineConfig:
    """Effective settings of one pipeline run"""
    orderbooks: Optional[str] = None
    transactions: Optional[str] = None
    blocks: Optional[str] = None
    profiles: Optional[str] = None
    date_from: Optional[date] = None
    date_to: Optional[date] = None
    gammas: list[float] = field(default_factory=lambda: [2.0])
    bandwidths: list[float] = field(default_factory=lambda: list(DEFAULT_BANDWIDTHS))
    default_bandwidth: float = 60.0
    latency_kind: str = "gamma"
    latency_covariates: bool = True
    quantity_points: int = 200
    fee_points: int = 41
    fee_max: float = 0.01
    settlement_fee_per_byte: Optional[float] = None
    fee_proxy: str = "median"
    settlement_tx_bytes: int = 250
    deduct_withdrawal_fee: bool = False
    strict: bool = False
    allow_lookahead: bool = False
    output_dir: str = OUTPUT_ROOT
    seed: int = DEFAULT_SEED
    jobs: int = DEFAULT_JOBS
    stale_seconds: int = 60
    default_confirmations: int = 3
    simulation: Optional[str] = None

    def __post_init__(self):
        for name in ("date_from", "date_to"):
            value = getattr(self, name)
            if isinstance(value, str):
                setattr(self, name, date.fromisoformat(value))
        self.gammas = [float(g) for g in self.gammas]
        self.bandwidths = [float(h) for h in self.bandwidths]

    def validate(self, require_inputs: tuple[str, ...] = ()) -> "PipelineConfig":
        """Check the run settings; `require_inputs` names input paths that must exist"""
        if self.date_from is None or self.date_to is None:
            raise ValidationError("Date range is not set (--from/--to)")
        if self.date_to < self.date_from:
            raise ValidationError(f"Empty date range: {self.date_from} .. {self.date_to}")
        if not self.gammas or min(self.gammas) <= 1:
            raise ValidationError(f"CRRA bounds need every gamma > 1, got {self.gammas}")
        if not self.bandwidths or min(self.bandwidths) <= 0:
            raise ValidationError("Bandwidth grid must contain positive values")
        if self.latency_kind not in ("exponential", "gamma"):
            raise ValidationError(f"Unknown latency model kind: {self.latency_kind}")
        if self.fee_proxy not in ("median", "optimal"):
            raise ValidationError(f"Unknown fee proxy: {self.fee_proxy!r}")
        if self.settlement_tx_bytes <= 0:
            raise ValidationError(f"Settlement transaction size must be positive, got {self.settlement_tx_bytes}")
        if self.jobs < 1:
            raise ValidationError(f"jobs must be at least 1, got {self.jobs}")
        for name in require_inputs:
            path = getattr(self, name)
            if not path or not Path(path).exists():
                raise ValidationError(f"Input '{name}' not found: {path}")
        return self

    @property
    def days(self) -> list[date]:
        if self.date_from is None or self.date_to is None:
            return []
        count = (self.date_to - self.date_from).days + 1
        return [date.fromordinal(self.date_from.toordinal() + i) for i in range(max(count, 0))]

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_dict(self) -> dict:
        data = asdict(self)
        for name in ("date_from", "date_to"):
            if data[name] is not None:
                data[name] = data[name].isoformat()
        return data


def load_pipeline_config(path: Optional[str] = None, **overrides) -> PipelineConfig:
    """
    Read a TOML or JSON config file and apply overrides (None values are ignored).
    Relative input paths resolve against the config file's directory.
    """
    data: dict = {}
    if path:
        source = Path(path)
        if not source.exists():
            raise ValidationError(f"Config file not found: {path}")
        try:
            if source.suffix == ".json":
                data = json.loads(source.read_text(encoding="utf-8"))
            else:
                data = tomllib.loads(source.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise ValidationError(f"Cannot parse config {path}: {e}") from e
        data = data.get("pipeline", data)
        for name in ("orderbooks", "transactions", "blocks", "profiles", "simulation"):
            if data.get(name) and not Path(data[name]).is_absolute():
                data[name] = str(source.parent / data[name])

    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"Unknown config keys: {unknown}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(**data)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Invalid config: {e}") from e


def config_hash(config: PipelineConfig) -> str:
    """SHA-256 of the canonical JSON form of the run-relevant settings"""
    data = config.to_dict()
    for volatile in ("jobs", "output_dir"):
        data.pop(volatile)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
