from datetime import timedelta

import pandas as pd
from loguru import logger

from config import PipelineConfig
from services.errors import ValidationError
from services.marketdata import MarketDataService
from utils import read_blocks, read_orderbooks, read_profiles, read_transactions, record_stage, write_csv, write_json
from utils.io import orderbooks_frame

# Normalized artifacts written by `ingest`
ORDERBOOKS = "orderbooks.csv"
PROFILES = "profiles.json"
TRANSACTIONS = "transactions.csv"
BLOCKS = "blocks.csv"
COVERAGE = "coverage.csv"


def ingest_window(cfg: PipelineConfig) -> tuple[pd.Timestamp, pd.Timestamp]:
    """UTC window [from - 1 day, to + 1 day): the extra day feeds bandwidth and latency fits"""
    start = pd.Timestamp(cfg.date_from - timedelta(days=1), tz="UTC")
    end = pd.Timestamp(cfg.date_to + timedelta(days=1), tz="UTC")
    return start, end


def coverage_frame(cfg: PipelineConfig, aligned: dict, exchanges: list[str],
                   transactions: pd.DataFrame, blocks: pd.DataFrame) -> pd.DataFrame:
    """Per-day and per-exchange share of minutes with a usable book, plus chain activity"""
    per_day: dict = {}
    for minute, snaps in aligned.items():
        counts = per_day.setdefault(minute.date(), {e: 0 for e in exchanges})
        for snap in snaps:
            counts[snap.exchange_id] = counts.get(snap.exchange_id, 0) + 1

    tx_days = transactions["inclusion_time"].dt.date.value_counts() if len(transactions) else pd.Series(dtype=int)
    block_days = blocks["timestamp"].dt.date.value_counts() if len(blocks) else pd.Series(dtype=int)
    rows = []
    for day in [cfg.date_from - timedelta(days=1), *cfg.days]:
        counts = per_day.get(day, {})
        for exchange in exchanges:
            minutes = counts.get(exchange, 0)
            rows.append({
                "day": day.isoformat(),
                "exchange": exchange,
                "book_minutes": minutes,
                "book_coverage": minutes / 1440.0,
                "transactions": int(tx_days.get(day, 0)),
                "blocks": int(block_days.get(day, 0)),
            })
    return pd.DataFrame(rows)


def ingest_handler(args, cfg: PipelineConfig) -> int:
    """Validate and normalize the raw input files"""
    cfg.validate(require_inputs=("orderbooks", "transactions", "blocks", "profiles"))
    start, end = ingest_window(cfg)

    profiles = read_profiles(cfg.profiles)
    snapshots = [s for s in read_orderbooks(cfg.orderbooks, cfg.strict) if start <= s.timestamp < end]
    unknown = sorted({s.exchange_id for s in snapshots} - set(profiles))
    if unknown:
        raise ValidationError(f"Orderbooks for exchanges without a profile: {unknown}")
    if not snapshots:
        raise ValidationError(f"No orderbook snapshots between {start} and {end}")

    transactions = read_transactions(cfg.transactions, cfg.strict)
    transactions = transactions[(transactions["inclusion_time"] >= start) & (transactions["inclusion_time"] < end)]
    blocks = read_blocks(cfg.blocks)
    blocks = blocks[(blocks["timestamp"] >= start) & (blocks["timestamp"] < end)]

    service = MarketDataService(stale_seconds=cfg.stale_seconds)
    aligned = service.align_snapshots(snapshots)
    coverage = coverage_frame(cfg, aligned, sorted(profiles), transactions, blocks)
    for row in coverage[coverage["book_coverage"] < 1.0].itertuples():
        logger.warning(f"{row.day} {row.exchange}: books cover {row.book_coverage:.1%} of minutes")

    normalized = {
        exchange_id: {
            "taker_fee": p.taker_fee,
            "withdrawal_fee": p.effective_withdrawal_fee,
            "confirmations": cfg.default_confirmations if p.confirmations is None else p.confirmations,
            "margin": p.margin_flag,
            "business": p.business_flag,
        }
        for exchange_id, p in profiles.items()
    }
    tx_out = transactions.assign(
        announce_time=transactions["announce_time"].map(pd.Timestamp.isoformat),
        inclusion_time=transactions["inclusion_time"].map(pd.Timestamp.isoformat),
    ).drop(columns="latency")
    block_out = blocks.assign(timestamp=blocks["timestamp"].map(pd.Timestamp.isoformat))

    files = [
        write_csv(cfg.out / ORDERBOOKS, orderbooks_frame(snapshots)),
        write_json(cfg.out / PROFILES, {"exchanges": normalized}),
        write_csv(cfg.out / TRANSACTIONS, tx_out),
        write_csv(cfg.out / BLOCKS, block_out),
        write_csv(cfg.out / COVERAGE, coverage),
    ]
    record_stage(cfg, "ingest", files)
    logger.info(f"Ingested {len(snapshots)} books, {len(transactions)} transactions, {len(blocks)} blocks")
    return 0


def load_ingested(cfg: PipelineConfig):
    """Normalized snapshots, profiles, transactions and blocks from the output directory"""
    return (
        read_orderbooks(cfg.out / ORDERBOOKS, strict=True),
        read_profiles(cfg.out / PROFILES),
        read_transactions(cfg.out / TRANSACTIONS, strict=True),
        read_blocks(cfg.out / BLOCKS),
    )


def register_data_commands(subparsers, common) -> None:
    parser = subparsers.add_parser("ingest", parents=[common], help="validate and normalize raw inputs")
    parser.set_defaults(handler=ingest_handler)
