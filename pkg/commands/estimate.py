from datetime import date, timedelta

import numpy as np
import pandas as pd
from loguru import logger

from commands.data import BLOCKS, ORDERBOOKS, TRANSACTIONS
from config import PipelineConfig
from decorators import upstream_required
from services.errors import ValidationError
from services.latency import LatencyService, block_time_stats
from services.volatility import BidSeries, VolatilityService, utc
from utils import read_blocks, read_orderbooks, read_transactions, record_stage, run_parallel, write_csv, write_json

VOL = "vol.csv"
BANDWIDTHS = "bandwidths.csv"
LATENCY_SUMMARY = "latency_summary.csv"


def latency_file(day: date) -> str:
    return f"latency_{day.isoformat()}.json"


def _estimate_exchange(job: tuple) -> tuple[pd.DataFrame, pd.DataFrame]:
    series, days, bandwidths, default_bandwidth = job
    service = VolatilityService(bandwidths, default_bandwidth)
    vol = service.estimate_range(series, days)
    chosen = pd.DataFrame(
        [{"exchange": series.exchange_id, "day": d.isoformat(), "bandwidth": h} for d, h in sorted(vol.bandwidths.items())]
    )
    return vol.to_frame(), chosen


@upstream_required("ingest")
def vol_handler(args, cfg: PipelineConfig) -> int:
    """Per-minute spot volatility for every exchange"""
    cfg.validate()
    series = BidSeries.from_snapshots(read_orderbooks(cfg.out / ORDERBOOKS, strict=True))
    if not series:
        raise ValidationError("No bid series to estimate")
    jobs = [(s, cfg.days, cfg.bandwidths, cfg.default_bandwidth) for _, s in sorted(series.items())]
    results = run_parallel(_estimate_exchange, jobs, cfg.jobs)

    vol = pd.concat([r[0] for r in results], ignore_index=True)
    chosen = pd.concat([r[1] for r in results], ignore_index=True)
    trimmed = int(vol["trimmed"].sum())
    logger.info(f"Estimated {len(vol)} spot volatilities, {trimmed} trimmed")
    files = [write_csv(cfg.out / VOL, vol), write_csv(cfg.out / BANDWIDTHS, chosen)]
    record_stage(cfg, "vol", files)
    return 0


def day_blocks(blocks: pd.DataFrame, day: date):
    """Inter-block statistics from blocks mined on `day`, else from everything before its end"""
    end = utc(day) + pd.Timedelta(days=1)
    on_day = blocks[blocks["timestamp"].dt.date == day]
    if len(on_day) >= 3:
        return block_time_stats(on_day["timestamp"])
    earlier = blocks[blocks["timestamp"] < end]
    logger.warning(f"{day}: only {len(on_day)} blocks, using {len(earlier)} blocks up to that day")
    return block_time_stats(earlier["timestamp"])


def fee_proxy(cfg: PipelineConfig, transactions: pd.DataFrame, fit_day: date) -> float:
    """Configured settlement fee per byte, else the median fee per byte of the fitting day"""
    if cfg.settlement_fee_per_byte is not None:
        return float(cfg.settlement_fee_per_byte)
    fees = transactions.loc[transactions["inclusion_time"].dt.date == fit_day, "fee_per_byte"]
    return float(np.median(fees))


@upstream_required("ingest")
def latency_handler(args, cfg: PipelineConfig) -> int:
    """Walk-forward duration models with a per-day summary"""
    cfg.validate()
    if cfg.allow_lookahead:
        logger.warning("Look-ahead enabled: models are fitted on the day they are applied to (diagnostics only)")
    transactions = read_transactions(cfg.out / TRANSACTIONS, strict=True)
    blocks = read_blocks(cfg.out / BLOCKS)

    models, summary = LatencyService().walk_forward(transactions, cfg.days, cfg.allow_lookahead)
    if not models:
        raise ValidationError("Not enough transactions to fit a latency model for any day")

    files = []
    for day, fitted in sorted(models.items()):
        fit_day = day if cfg.allow_lookahead else day - timedelta(days=1)
        stats = day_blocks(blocks, fit_day)
        document = {
            "day": day.isoformat(),
            "fit_day": fit_day.isoformat(),
            "models": {name: model.to_dict() for name, model in fitted.items()},
            "blocks": {"mean": stats.mean, "variance": stats.variance},
            "fee_per_byte": fee_proxy(cfg, transactions, fit_day),
        }
        files.append(write_json(cfg.out / latency_file(day), document))
    files.append(write_csv(cfg.out / LATENCY_SUMMARY, summary))
    record_stage(cfg, "latency", files)
    return 0


def register_estimate_commands(subparsers, common) -> None:
    parser = subparsers.add_parser("vol", parents=[common], help="estimate spot volatility")
    parser.set_defaults(handler=vol_handler)
    parser = subparsers.add_parser("latency", parents=[common], help="fit settlement latency models")
    parser.set_defaults(handler=latency_handler)
