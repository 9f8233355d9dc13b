import json
import os
import tempfile
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd
from loguru import logger

from services.errors import ValidationError
from services.latency import TxRecord, records_frame
from services.marketdata import ExchangeProfile, OrderbookSnapshot
from services.volatility import utc

ORDERBOOK_COLUMNS = ["exchange", "timestamp", "side", "level", "price", "quantity"]
TRANSACTION_COLUMNS = ["tx_id", "announce_time", "inclusion_time", "fee_per_byte", "size", "mempool_size"]
BLOCK_COLUMNS = ["height", "timestamp"]


def _atomic_write(path: Path, write) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            write(f)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    """Write a frame as CSV through a temp file and rename"""
    return _atomic_write(path, lambda f: frame.to_csv(f, index=False, lineterminator="\n"))


def write_json(path: Path, data) -> Path:
    def dump(f):
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False, default=str)
        f.write("\n")
    return _atomic_write(path, dump)


def _read_table(path: Path, columns: list[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Input file not found: {path}")
    if path.suffix in (".jsonl", ".ndjson"):
        frame = pd.read_json(path, lines=True, dtype={"exchange": str, "side": str, "tx_id": str},
                             convert_dates=False, precise_float=True)
    else:
        frame = pd.read_csv(path, dtype={"exchange": str, "side": str, "tx_id": str}, float_precision="round_trip")
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValidationError(f"{path.name}: missing columns {missing}")
    return frame[columns]


def _reject(strict: bool, message: str) -> None:
    if strict:
        raise ValidationError(message)
    logger.warning(message)


def parse_orderbooks(frame: pd.DataFrame, strict: bool = False) -> list[OrderbookSnapshot]:
    """
    Snapshots from long-format rows (exchange, timestamp, side, level, price,
    quantity). Invalid books are dropped with a warning, or raise in strict mode.
    """
    frame = frame.copy()
    frame["timestamp"] = pd.to_datetime(frame["timestamp"], utc=True, errors="coerce")
    bad = frame["timestamp"].isna() | ~frame["side"].isin(["bid", "ask"]) | frame[["price", "quantity", "level"]].isna().any(axis=1)
    if bad.any():
        _reject(strict, f"{int(bad.sum())} malformed orderbook rows")
        frame = frame[~bad]

    snapshots = []
    for (exchange, timestamp), rows in frame.groupby(["exchange", "timestamp"], sort=True):
        rows = rows.sort_values("level", kind="stable")
        if rows.duplicated(["side", "level"]).any():
            _reject(strict, f"{exchange} @ {timestamp}: duplicate levels")
            continue
        bids = rows.loc[rows["side"] == "bid", ["price", "quantity"]].itertuples(index=False, name=None)
        asks = rows.loc[rows["side"] == "ask", ["price", "quantity"]].itertuples(index=False, name=None)
        try:
            snapshots.append(OrderbookSnapshot(str(exchange), timestamp, tuple(bids), tuple(asks)))
        except ValidationError as e:
            _reject(strict, f"Dropping book: {e}")
    return snapshots


def read_orderbooks(path: Path, strict: bool = False) -> list[OrderbookSnapshot]:
    snapshots = parse_orderbooks(_read_table(path, ORDERBOOK_COLUMNS), strict)
    logger.info(f"Read {len(snapshots)} orderbook snapshots from {Path(path).name}")
    return snapshots


def orderbooks_frame(snapshots: Iterable[OrderbookSnapshot]) -> pd.DataFrame:
    rows = []
    for snap in snapshots:
        for side, ladder in (("bid", snap.bids), ("ask", snap.asks)):
            for level, (price, quantity) in enumerate(ladder, start=1):
                rows.append((snap.exchange_id, snap.timestamp.isoformat(), side, level, price, quantity))
    return pd.DataFrame(rows, columns=ORDERBOOK_COLUMNS)


def read_profiles(path: Path) -> dict[str, ExchangeProfile]:
    """
    Exchange profiles from TOML or JSON:

        [exchanges.<id>]
        taker_fee = 0.002
        withdrawal_fee = 0.0005   # optional, asset units
        confirmations = 2         # optional
        margin = true
        business = false
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Profiles file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ValidationError(f"Cannot parse profiles {path}: {e}") from e

    profiles = {}
    for exchange_id, entry in sorted(data.get("exchanges", {}).items()):
        profiles[exchange_id] = ExchangeProfile(
            exchange_id=exchange_id,
            taker_fee=float(entry.get("taker_fee", 0.0)),
            withdrawal_fee=entry.get("withdrawal_fee"),
            confirmations=entry.get("confirmations"),
            margin_flag=bool(entry.get("margin", False)),
            business_flag=bool(entry.get("business", False)),
        )
    if len(profiles) < 2:
        raise ValidationError(f"{path.name}: need at least 2 exchange profiles")
    return profiles


def read_transactions(path: Path, strict: bool = False) -> pd.DataFrame:
    """Confirmed transactions with a `latency` column in minutes"""
    frame = _read_table(path, TRANSACTION_COLUMNS)
    records = []
    for row in frame.itertuples(index=False):
        try:
            records.append(TxRecord(
                tx_id=str(row.tx_id),
                announce_time=utc(row.announce_time),
                inclusion_time=utc(row.inclusion_time),
                fee_per_byte=float(row.fee_per_byte),
                size=int(row.size),
                mempool_size=int(row.mempool_size),
            ))
        except (ValidationError, ValueError, TypeError) as e:
            _reject(strict, f"Dropping transaction {row.tx_id}: {e}")
    logger.info(f"Read {len(records)} transactions from {Path(path).name}")
    return records_frame(records)


def read_blocks(path: Path) -> pd.DataFrame:
    frame = _read_table(path, BLOCK_COLUMNS).sort_values("height", kind="stable")
    if frame["height"].duplicated().any():
        raise ValidationError(f"{Path(path).name}: duplicate block heights")
    frame["timestamp"] = pd.to_datetime(frame["timestamp"], utc=True)
    return frame.reset_index(drop=True)


def read_json(path: Path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Artifact not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def read_csv(path: Path, **kwargs) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Artifact not found: {path}")
    return pd.read_csv(path, float_precision="round_trip", **kwargs)


def finite_or_none(value):
    """JSON-safe float"""
    return None if value is None or not np.isfinite(value) else float(value)
