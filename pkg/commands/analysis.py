import numpy as np
import pandas as pd
from loguru import logger

from commands.data import ORDERBOOKS, PROFILES, TRANSACTIONS
from commands.estimate import VOL, latency_file
from config import PipelineConfig
from decorators import upstream_required
from services.bounds import BASIS_POINTS, BoundsService, FEE_COVARIATE, FeeBoundCurve
from services.errors import ValidationError
from services.latency import BlockTimeStats, LatencyModel, latency_service, mempool_at, to_asset_fee, to_fee_per_byte
from services.marketdata import MarketDataService, PriceDifferenceMatrix
from services.volatility import utc
from utils import read_orderbooks, read_profiles, read_transactions, record_stage, run_parallel, write_csv
from utils.io import read_csv, read_json

BOUNDS = "bounds.csv"
BOUNDS_SUMMARY = "bounds_summary.csv"
CONFIRMATION_PROFILE = "confirmation_profile.csv"
FEE_RESPONSE = "fee_response.csv"
EXCESS = "excess.csv"
SHARE_WITHIN = "share_within.csv"
IMPLIED_GAMMA = "implied_gamma.csv"
IMPLIED_GAMMA_DAILY = "implied_gamma_daily.csv"

BOUND_COLUMNS = ["timestamp", "sell_exchange", "sigma", "fee_per_byte", "m1", "m2", "gamma", "bound_bp",
                 "security_share", "uncertainty_share"]
EXCESS_COLUMNS = ["timestamp", "buy", "sell", "delta_bp", "bound_bp", "excess_bp", "within",
                  "quantity", "fee", "fee_per_byte"]
SHARE_COLUMNS = ["timestamp", "share_within", "positive"]


def model_name(cfg: PipelineConfig) -> str:
    return cfg.latency_kind + ("_cov" if cfg.latency_covariates else "")


def market_settings(cfg: PipelineConfig) -> dict:
    return {
        "quantity_points": cfg.quantity_points,
        "fee_points": cfg.fee_points,
        "fee_max": cfg.fee_max,
        "deduct_withdrawal_fee": cfg.deduct_withdrawal_fee,
        "stale_seconds": cfg.stale_seconds,
    }


def load_day_model(cfg: PipelineConfig, day) -> tuple[LatencyModel, BlockTimeStats, float]:
    """Latency model, block statistics and fee proxy to apply on `day`"""
    document = read_json(cfg.out / latency_file(day))
    if document["fit_day"] == day.isoformat() and not cfg.allow_lookahead:
        raise ValidationError(f"Latency model for {day} was fitted on the same day; refusing look-ahead")
    model = LatencyModel.from_dict(document["models"][model_name(cfg)])
    blocks = BlockTimeStats(**document["blocks"])
    return model, blocks, float(document["fee_per_byte"])


def mempool_known(model: LatencyModel, size: float) -> bool:
    return "log_mempool_size" not in model.schema or bool(np.isfinite(size))


def sell_bounds(curve: FeeBoundCurve, sigma: dict, minute, mempool_size: float, confirmations: dict):
    """d(f) lookup per sell exchange at one minute; None where the exchange has no volatility estimate"""
    def bound_for(sell):
        value = sigma.get((minute, sell))
        return None if value is None else curve.bound_fn(value, mempool_size, confirmations[sell])
    return bound_for


def fee_choices(matrix: PriceDifferenceMatrix, snaps, profiles, marketdata: MarketDataService, bound_for) -> pd.DataFrame:
    """
    Joint trade quantity and settlement fee (asset units) of every pair with a
    positive difference, against the sell exchange's fee-dependent bound.
    """
    books = {s.exchange_id: s for s in snaps}
    rows = []
    for i, sell in enumerate(matrix.exchanges):
        buys = [buy for j, buy in enumerate(matrix.exchanges) if j != i and matrix.delta[i, j] > 0]
        bound_fn = bound_for(sell) if buys else None
        if bound_fn is None:
            continue
        for buy in buys:
            choice = marketdata.optimal_quantity_fee(books[buy], books[sell], profiles, bound_fn)
            rows.append({"buy": buy, "sell": sell, "quantity": choice.quantity, "fee": choice.fee,
                         "total_return": choice.total_return})
    return pd.DataFrame(rows, columns=["buy", "sell", "quantity", "fee", "total_return"])


def optimal_fees(vol, model, blocks, mempool, confirmations, gamma, fee_inputs) -> dict:
    """
    Fee per byte of each sell exchange's best joint (quantity, fee) trade per
    minute. Minutes and exchanges without a profitable trade are absent.
    """
    buckets, profiles, settings, tx_bytes = fee_inputs
    marketdata = MarketDataService(**settings)
    curve = FeeBoundCurve(model, blocks, gamma, marketdata.fee_grid(), tx_bytes)
    sigma = {(r.minute, r.exchange): r.sigma for r in vol.itertuples(index=False)}
    chosen = {}
    for minute, snaps in sorted(buckets.items()):
        size = mempool.get(minute, np.nan)
        if len(snaps) < 2 or not mempool_known(model, size):
            continue
        matrix = marketdata.difference_matrix(snaps, profiles)
        choices = fee_choices(matrix, snaps, profiles, marketdata, sell_bounds(curve, sigma, minute, size, confirmations))
        traded = choices[choices["quantity"] > 0]
        for sell, part in traded.groupby("sell", sort=True):
            best = part.loc[part["total_return"].idxmax()]
            chosen[(minute, sell)] = float(to_fee_per_byte(best["fee"], tx_bytes))
    return chosen


def bound_rows(vol: pd.DataFrame, latency_moments, blocks: BlockTimeStats, confirmations: dict, gammas) -> pd.DataFrame:
    """
    Bounds with security and uncertainty shares for every retained volatility
    estimate. `latency_moments(minute, exchange)` returns (fee per byte,
    mean, variance) of the inclusion latency, or None to skip the row.
    """
    service = BoundsService()
    rows = []
    for row in vol.itertuples(index=False):
        moments = latency_moments(row.minute, row.exchange)
        if moments is None:
            continue
        fee, mean_tau, var_tau = moments
        for gamma in gammas:
            bound = service.decompose(row.sigma, gamma, mean_tau, var_tau, blocks, confirmations[row.exchange])
            rows.append((row.timestamp, row.exchange, row.sigma, fee, bound.inputs.m1, bound.inputs.m2, gamma,
                         bound.bp, bound.security_share, bound.uncertainty_share))
    return pd.DataFrame(rows, columns=BOUND_COLUMNS)


def _bounds_day(job: tuple) -> pd.DataFrame:
    vol, model, blocks, fee, mempool, confirmations, gammas, fee_inputs = job
    chosen = optimal_fees(vol, model, blocks, mempool, confirmations, gammas[0], fee_inputs) if fee_inputs else {}
    if fee_inputs:
        logger.debug(f"{len(chosen)} of {len(vol)} minute bounds use the optimal settlement fee")
    cache: dict = {}

    def latency_moments(minute, exchange):
        size = mempool.get(minute, np.nan)
        if not mempool_known(model, size):
            return None
        fee_per_byte = chosen.get((minute, exchange), fee)
        key = (minute, fee_per_byte)
        if key not in cache:
            cache[key] = latency_service.predict_moments(model, {"fee_per_byte": fee_per_byte, "mempool_size": size})
        return (fee_per_byte, *cache[key])

    return bound_rows(vol, latency_moments, blocks, confirmations, gammas)


def load_vol(cfg: PipelineConfig) -> pd.DataFrame:
    vol = read_csv(cfg.out / VOL, dtype={"exchange": str})
    vol = vol[~vol["trimmed"].astype(bool)].copy()
    vol["minute"] = pd.to_datetime(vol["timestamp"], utc=True)
    return vol


@upstream_required("ingest", "vol", "latency")
def bounds_handler(args, cfg: PipelineConfig) -> int:
    """Per-minute CRRA bounds with security and uncertainty shares"""
    cfg.validate()
    vol = load_vol(cfg)
    profiles = read_profiles(cfg.out / PROFILES)
    transactions = read_transactions(cfg.out / TRANSACTIONS, strict=True)
    confirmations = {e: p.effective_confirmations for e, p in profiles.items()}
    settings = market_settings(cfg)
    aligned = {}
    if cfg.fee_proxy == "optimal":
        aligned = MarketDataService(**settings).align_snapshots(read_orderbooks(cfg.out / ORDERBOOKS, strict=True))

    jobs, day_models = [], {}
    for day in cfg.days:
        day_vol = vol[vol["minute"].dt.date == day]
        if day_vol.empty:
            logger.warning(f"{day}: no retained volatility estimates")
            continue
        if not (cfg.out / latency_file(day)).exists():
            logger.warning(f"{day}: no latency model, skipping")
            continue
        model, blocks, fee = load_day_model(cfg, day)
        day_models[day] = (model, blocks, fee)
        minutes = pd.DatetimeIndex(sorted(day_vol["minute"].unique()))
        mempool = mempool_at(transactions, minutes)
        fee_inputs = None
        if cfg.fee_proxy == "optimal":
            buckets = {m: s for m, s in aligned.items() if m.date() == day}
            fee_inputs = (buckets, profiles, settings, cfg.settlement_tx_bytes)
        jobs.append((day_vol, model, blocks, fee, mempool, confirmations, cfg.gammas, fee_inputs))
    if not jobs:
        raise ValidationError("No day has both volatility estimates and a latency model")

    bounds = pd.concat(run_parallel(_bounds_day, jobs, cfg.jobs), ignore_index=True)
    summary = pd.concat(
        [BoundsService().summarize(part).assign(gamma=g) for g, part in bounds.groupby("gamma", sort=True)],
        ignore_index=True,
    )
    files = [write_csv(cfg.out / BOUNDS, bounds), write_csv(cfg.out / BOUNDS_SUMMARY, summary)]
    files += security_tables(cfg, vol, transactions, day_models, confirmations)
    record_stage(cfg, "bounds", files)
    logger.info(f"Computed {len(bounds)} bounds for {bounds['sell_exchange'].nunique()} exchanges")
    return 0


def security_tables(cfg, vol, transactions, day_models, confirmations) -> list:
    """Confirmation sweep and fee response at each exchange's median volatility under the last day's model"""
    last_day = max(day_models)
    model, blocks, fee = day_models[last_day]
    mempool = mempool_at(transactions, pd.DatetimeIndex([utc(last_day)])).iloc[0]
    if not np.isfinite(mempool):
        mempool = float(transactions["mempool_size"].median())
    covariates = {"fee_per_byte": fee, "mempool_size": mempool}
    mean_tau, var_tau = latency_service.predict_moments(model, covariates)
    gamma = cfg.gammas[0]
    service = BoundsService()

    profiles, responses = [], []
    fees = np.unique(np.quantile(transactions["fee_per_byte"], np.linspace(0.0, 1.0, 11)))
    for exchange, part in vol.groupby("exchange", sort=True):
        sigma = float(part["sigma"].median())
        profile = service.confirmation_profile(sigma, gamma, mean_tau, var_tau, blocks)
        profiles.append(profile.assign(exchange=exchange, sigma=sigma, gamma=gamma))
        if FEE_COVARIATE in model.schema:
            response = service.bound_fee_response(model, covariates, fees, sigma, gamma, blocks, confirmations[exchange])
            response.insert(1, "fee", to_asset_fee(response["fee_per_byte"], cfg.settlement_tx_bytes))
            responses.append(response.assign(exchange=exchange, sigma=sigma, gamma=gamma))

    files = [write_csv(cfg.out / CONFIRMATION_PROFILE, pd.concat(profiles, ignore_index=True))]
    if responses:
        files.append(write_csv(cfg.out / FEE_RESPONSE, pd.concat(responses, ignore_index=True)))
    return files


def _excess_day(job: tuple) -> tuple[pd.DataFrame, pd.DataFrame]:
    buckets, profiles, bound_map, settings, fee_inputs = job
    marketdata = MarketDataService(**settings)
    bounds = BoundsService()
    curve = None
    if fee_inputs is not None:
        model, blocks, gamma, tx_bytes, sigma, mempool, confirmations = fee_inputs
        curve = FeeBoundCurve(model, blocks, gamma, marketdata.fee_grid(), tx_bytes)

    frames, shares = [], []
    for minute, snaps in sorted(buckets.items()):
        if len(snaps) < 2:
            continue
        matrix = marketdata.difference_matrix(snaps, profiles)
        d = bound_map.get(minute, {})
        result = bounds.excess_differences(matrix, [d.get(e, np.nan) / BASIS_POINTS for e in matrix.exchanges])
        frame = result.to_frame()
        if frame.empty:
            continue
        size = mempool.get(minute, np.nan) if curve is not None else np.nan
        if curve is not None and mempool_known(model, size):
            choices = fee_choices(matrix, snaps, profiles, marketdata, sell_bounds(curve, sigma, minute, size, confirmations))
            frame = frame.merge(choices[["buy", "sell", "quantity", "fee"]], on=["buy", "sell"], how="left")
        frame = frame.reindex(columns=EXCESS_COLUMNS)
        frame[["quantity", "fee"]] = frame[["quantity", "fee"]].astype(float)
        frame["fee_per_byte"] = to_fee_per_byte(frame["fee"], tx_bytes) if curve is not None else np.nan
        frames.append(frame)
        shares.append({
            "timestamp": minute,
            "share_within": result.share_within,
            "positive": int((frame["delta_bp"] > 0).sum()),
        })
    excess = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=EXCESS_COLUMNS)
    return excess, pd.DataFrame(shares, columns=SHARE_COLUMNS)


def bound_lookup(bounds: pd.DataFrame, gamma: float, column: str = "bound_bp") -> dict:
    """{minute: {sell exchange: value}} for the rows of one gamma"""
    lookup: dict = {}
    for row in bounds[bounds["gamma"] == gamma].itertuples(index=False):
        lookup.setdefault(pd.Timestamp(row.timestamp), {})[row.sell_exchange] = getattr(row, column)
    return lookup


@upstream_required("ingest", "latency", "bounds")
def excess_handler(args, cfg: PipelineConfig) -> int:
    """
    Cost-adjusted differences in excess of the sell-side bound, first gamma,
    with the joint (quantity, settlement fee) choice of every positive pair
    """
    cfg.validate()
    profiles = read_profiles(cfg.out / PROFILES)
    snapshots = read_orderbooks(cfg.out / ORDERBOOKS, strict=True)
    transactions = read_transactions(cfg.out / TRANSACTIONS, strict=True)
    bounds = read_csv(cfg.out / BOUNDS, dtype={"sell_exchange": str})
    gamma = cfg.gammas[0]
    bound_map = bound_lookup(bounds, gamma)
    sigma = {(minute, e): s for minute, row in bound_lookup(bounds, gamma, "sigma").items() for e, s in row.items()}
    confirmations = {e: p.effective_confirmations for e, p in profiles.items()}

    settings = market_settings(cfg)
    aligned = MarketDataService(**settings).align_snapshots(snapshots)
    jobs = []
    for day in cfg.days:
        buckets = {m: s for m, s in aligned.items() if m.date() == day}
        day_bounds = {m: b for m, b in bound_map.items() if m.date() == day}
        fee_inputs = None
        if buckets and (cfg.out / latency_file(day)).exists():
            model, blocks, _ = load_day_model(cfg, day)
            mempool = mempool_at(transactions, pd.DatetimeIndex(sorted(buckets)))
            fee_inputs = (model, blocks, gamma, cfg.settlement_tx_bytes, sigma, mempool, confirmations)
        jobs.append((buckets, profiles, day_bounds, settings, fee_inputs))
    results = run_parallel(_excess_day, jobs, cfg.jobs)

    excess = pd.concat([r[0] for r in results], ignore_index=True)
    shares = pd.concat([r[1] for r in results], ignore_index=True)
    positive = excess[excess["delta_bp"] > 0]
    overall = float(positive["within"].mean()) if len(positive) else float("nan")
    logger.info(f"{len(positive)} positive differences, {overall:.2%} within bounds")
    files = [write_csv(cfg.out / EXCESS, excess), write_csv(cfg.out / SHARE_WITHIN, shares)]
    record_stage(cfg, "excess", files)
    return 0


@upstream_required("bounds", "excess")
def implied_gamma_handler(args, cfg: PipelineConfig) -> int:
    """Largest implied risk aversion across pairs per minute, and its daily maximum"""
    cfg.validate()
    excess = read_csv(cfg.out / EXCESS, dtype={"buy": str, "sell": str})
    bounds = read_csv(cfg.out / BOUNDS, dtype={"sell_exchange": str})
    bounds = bounds[bounds["gamma"] == cfg.gammas[0]][["timestamp", "sell_exchange", "sigma", "m1", "m2"]]
    for frame in (excess, bounds):
        frame["timestamp"] = pd.to_datetime(frame["timestamp"], utc=True)
    joined = excess[excess["delta_bp"] > 0].merge(
        bounds, left_on=["timestamp", "sell"], right_on=["timestamp", "sell_exchange"], how="inner"
    )
    joined = joined[joined["sigma"] > 0]

    service = BoundsService()
    rows = []
    for timestamp, part in joined.groupby("timestamp", sort=True):
        values = [
            service.implied_gamma(r.delta_bp / BASIS_POINTS, r.sigma, r.m1, r.m2)
            for r in part.itertuples(index=False)
        ]
        best = int(np.argmax(values))
        rows.append({
            "timestamp": timestamp,
            "gamma_hat": values[best],
            "buy": part["buy"].iloc[best],
            "sell": part["sell"].iloc[best],
            "pairs": len(values),
        })
    per_minute = pd.DataFrame(rows, columns=["timestamp", "gamma_hat", "buy", "sell", "pairs"])
    day = pd.to_datetime(per_minute["timestamp"], utc=True).dt.date.map(lambda d: d.isoformat())
    daily = per_minute.groupby(day)["gamma_hat"].agg(gamma_hat_max="max", gamma_hat_median="median", minutes="count")
    daily = daily.rename_axis("day").reset_index()
    files = [write_csv(cfg.out / IMPLIED_GAMMA, per_minute), write_csv(cfg.out / IMPLIED_GAMMA_DAILY, daily)]
    record_stage(cfg, "implied-gamma", files)
    return 0


def register_analysis_commands(subparsers, common) -> None:
    parser = subparsers.add_parser("bounds", parents=[common], help="compute arbitrage bounds")
    parser.set_defaults(handler=bounds_handler)
    parser = subparsers.add_parser("excess", parents=[common], help="price differences in excess of bounds")
    parser.set_defaults(handler=excess_handler)
    parser = subparsers.add_parser("implied-gamma", parents=[common], help="implied risk aversion series")
    parser.set_defaults(handler=implied_gamma_handler)
