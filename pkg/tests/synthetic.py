"""Seeded synthetic inputs for tests: books, bid series, transactions and a small end-to-end fixture."""
from pathlib import Path

import numpy as np
import pandas as pd

from services.marketdata import OrderbookSnapshot
from services.volatility import BidSeries

T0 = pd.Timestamp("2019-01-02 00:00", tz="UTC")

# Gamma duration model used to generate transactions
TRUE_ALPHA = 0.62
TRUE_THETA = np.array([1.19, -0.22, 0.31])


def make_book(exchange_id, bids, asks, timestamp=T0) -> OrderbookSnapshot:
    return OrderbookSnapshot(exchange_id, pd.Timestamp(timestamp), tuple(bids), tuple(asks))


def random_ladders(rng: np.random.Generator, levels: int = 5):
    """Buy-side asks and sell-side bids around 100 with the sell side usually richer"""
    n_ask = int(rng.integers(1, levels + 1))
    n_bid = int(rng.integers(1, levels + 1))
    asks = 100.0 + np.cumsum(rng.uniform(0.05, 1.0, n_ask))
    bids = 101.0 - np.cumsum(rng.uniform(0.05, 1.0, n_bid))
    ask_sizes = rng.uniform(0.1, 3.0, n_ask)
    bid_sizes = rng.uniform(0.1, 3.0, n_bid)
    return list(zip(asks.tolist(), ask_sizes.tolist())), list(zip(bids.tolist(), bid_sizes.tolist()))


def brownian_bids(sigma: float, days: int, seed: int, exchange_id: str = "X",
                  start: pd.Timestamp = T0, regimes: dict | None = None) -> BidSeries:
    """
    Minute log bids with constant per-minute volatility `sigma`; `regimes`
    maps a minute offset to a new sigma from that minute on.
    """
    rng = np.random.default_rng(seed)
    n = days * 1440
    vol = np.full(n, sigma)
    for offset, level in sorted((regimes or {}).items()):
        vol[offset:] = level
    log_bid = np.log(100.0) + np.concatenate([[0.0], np.cumsum(vol[1:] * rng.standard_normal(n - 1))])
    index = pd.date_range(start, periods=n, freq="min")
    return BidSeries(exchange_id, pd.Series(log_bid, index=index))


def gamma_transactions(n: int, seed: int, alpha: float = TRUE_ALPHA, theta=TRUE_THETA,
                       start: pd.Timestamp = T0, days: int = 1) -> pd.DataFrame:
    """Transactions whose latency follows the gamma regression with rate exp(-x'theta)"""
    rng = np.random.default_rng(seed)
    fee = rng.lognormal(np.log(20.0), 0.8, n)
    mempool = np.maximum(1, rng.lognormal(np.log(5000.0), 0.6, n).round()).astype(int)
    x = np.column_stack([np.ones(n), np.log1p(fee), np.log(mempool)])
    latency = rng.gamma(alpha, np.exp(x @ np.asarray(theta)), n)
    latency = np.maximum(latency, 1e-3)
    offsets = np.sort(rng.uniform(0.0, days * 1440.0 - 1.0, n))
    announce = start + pd.to_timedelta(np.round(offsets * 60.0), unit="s")
    inclusion = announce + pd.to_timedelta(np.round(latency * 60e3), unit="ms")
    return pd.DataFrame({
        "tx_id": [f"tx{seed}-{i}" for i in range(n)],
        "announce_time": announce,
        "inclusion_time": inclusion,
        "latency": (inclusion - announce).total_seconds() / 60.0,
        "fee_per_byte": fee,
        "size": rng.integers(150, 600, n),
        "mempool_size": mempool,
    })


FIXTURE_PROFILES = """
[exchanges.A]
taker_fee = 0.001
withdrawal_fee = 0.001
confirmations = 1

[exchanges.B]
taker_fee = 0.002
confirmations = 3

[exchanges.C]
taker_fee = 0.0
withdrawal_fee = 0.0
"""


def write_fixture(root: Path, seed: int = 11, days: int = 3) -> dict:
    """
    Three exchanges over `days` UTC days starting 2019-01-01: two-level
    books every minute, transactions and blocks. Returns the input paths.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    start = pd.Timestamp("2019-01-01", tz="UTC")
    minutes = pd.date_range(start, periods=days * 1440, freq="min")
    common = np.log(3800.0) + np.cumsum(0.0008 * rng.standard_normal(len(minutes)))
    offsets = {"A": 0.0, "B": 0.004, "C": -0.001}

    rows = []
    for exchange, offset in offsets.items():
        mid = np.exp(common + offset + 0.001 * rng.standard_normal(len(minutes)))
        for minute, m in zip(minutes, mid):
            stamp = minute.isoformat()
            bid, ask = round(m * 0.9995, 2), round(m * 1.0005, 2)
            rows.append((exchange, stamp, "bid", 1, bid, 1.0))
            rows.append((exchange, stamp, "bid", 2, round(bid - 2.0, 2), 2.0))
            rows.append((exchange, stamp, "ask", 1, ask, 1.0))
            rows.append((exchange, stamp, "ask", 2, round(ask + 2.0, 2), 2.0))
    books = pd.DataFrame(rows, columns=["exchange", "timestamp", "side", "level", "price", "quantity"])

    txs = gamma_transactions(400 * days, seed + 1, start=start, days=days)
    txs = txs.assign(
        announce_time=txs["announce_time"].map(pd.Timestamp.isoformat),
        inclusion_time=txs["inclusion_time"].map(pd.Timestamp.isoformat),
    ).drop(columns="latency")

    gaps = rng.exponential(10.0, days * 200)
    block_times = start + pd.to_timedelta(np.round(np.cumsum(gaps) * 60.0), unit="s")
    block_times = block_times[block_times < start + pd.Timedelta(days=days)]
    blocks = pd.DataFrame({"height": np.arange(556000, 556000 + len(block_times)),
                           "timestamp": [t.isoformat() for t in block_times]})

    paths = {
        "orderbooks": root / "orderbooks.csv",
        "transactions": root / "transactions.csv",
        "blocks": root / "blocks.csv",
        "profiles": root / "profiles.toml",
        "simulation": root / "simulation.toml",
    }
    books.to_csv(paths["orderbooks"], index=False)
    txs.to_csv(paths["transactions"], index=False)
    blocks.to_csv(paths["blocks"], index=False)
    paths["profiles"].write_text(FIXTURE_PROFILES, encoding="utf-8")
    paths["simulation"].write_text(
        "[simulation]\npaths = 20000\nindifference_configs = 2\ntrace_paths = 2\n", encoding="utf-8"
    )
    return {k: str(v) for k, v in paths.items()}
