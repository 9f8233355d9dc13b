import math
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from services.errors import InsufficientHistoryError, ValidationError

MINUTES_PER_DAY = 1440
DEFAULT_BANDWIDTHS = (5, 10, 20, 30, 60, 120, 240)


def utc(value) -> pd.Timestamp:
    ts = pd.Timestamp(value)
    return ts.tz_localize("UTC") if ts.tzinfo is None else ts.tz_convert("UTC")


@dataclass
class BidSeries:
    """
    Log best-bid prices of one exchange on a complete UTC minute grid.

    Minutes without a quote hold NaN (gap markers); returns that span a gap
    are NaN as well and never enter an estimate.
    """
    exchange_id: str
    log_bid: pd.Series

    def __post_init__(self):
        index = self.log_bid.index
        if not isinstance(index, pd.DatetimeIndex):
            raise ValidationError(f"{self.exchange_id}: bid series needs a DatetimeIndex")
        if not index.is_monotonic_increasing or index.has_duplicates:
            raise ValidationError(f"{self.exchange_id}: timestamps must be strictly increasing")
        values = self.log_bid.to_numpy(dtype=float)
        if np.isinf(values).any():
            raise ValidationError(f"{self.exchange_id}: log prices must be finite")

    @classmethod
    def from_prices(cls, exchange_id: str, timestamps: Sequence, prices: Sequence[float]) -> "BidSeries":
        """Build the minute grid from (timestamp, bid price) observations"""
        index = pd.DatetimeIndex(pd.to_datetime(list(timestamps), utc=True)).floor("min")
        if index.has_duplicates or not index.is_monotonic_increasing:
            raise ValidationError(f"{exchange_id}: timestamps must be strictly increasing")
        prices = np.asarray(prices, dtype=float)
        if (prices <= 0).any() or not np.isfinite(prices).all():
            raise ValidationError(f"{exchange_id}: bid prices must be positive and finite")
        observed = pd.Series(np.log(prices), index=index)
        if len(observed) == 0:
            return cls(exchange_id, observed)
        grid = pd.date_range(observed.index[0], observed.index[-1], freq="min")
        return cls(exchange_id, observed.reindex(grid))

    @classmethod
    def from_snapshots(cls, snapshots: Iterable) -> dict[str, "BidSeries"]:
        """One series per exchange from orderbook snapshots (best bid)"""
        rows: dict[str, dict] = {}
        for snap in snapshots:
            rows.setdefault(snap.exchange_id, {})[snap.timestamp.floor("min")] = snap.best_bid
        series = {}
        for exchange_id, by_minute in sorted(rows.items()):
            minutes = sorted(by_minute)
            series[exchange_id] = cls.from_prices(exchange_id, minutes, [by_minute[m] for m in minutes])
        return series

    @property
    def returns(self) -> pd.Series:
        return self.log_bid.diff()

    def window(self, start: pd.Timestamp, end: pd.Timestamp) -> "BidSeries":
        """Sub-series with start <= t < end"""
        mask = (self.log_bid.index >= start) & (self.log_bid.index < end)
        return BidSeries(self.exchange_id, self.log_bid[mask])


@dataclass
class SpotVolSeries:
    """Per-minute spot volatility (per square-root minute) of one exchange"""
    exchange_id: str
    frame: pd.DataFrame  # columns: sigma, bandwidth, trimmed
    bandwidths: dict = field(default_factory=dict)

    @property
    def sigma(self) -> pd.Series:
        return self.frame["sigma"]

    @property
    def retained(self) -> pd.Series:
        return self.frame.loc[~self.frame["trimmed"], "sigma"]

    def to_frame(self) -> pd.DataFrame:
        out = self.frame.rename_axis("timestamp").reset_index()
        out.insert(0, "exchange", self.exchange_id)
        return out[["exchange", "timestamp", "sigma", "bandwidth", "trimmed"]]


def kernel_weights(bandwidth: float, window_bandwidths: float = 5.0) -> np.ndarray:
    """One-sided Gaussian weights for lags 0..ceil(window_bandwidths * h)"""
    if bandwidth <= 0:
        raise ValidationError(f"Bandwidth must be positive, got {bandwidth}")
    lags = np.arange(int(math.ceil(window_bandwidths * bandwidth)) + 1, dtype=float)
    return np.exp(-0.5 * (lags / bandwidth) ** 2)


def _kernel_sums(squared: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # output at t sums past terms only, in a fixed lag order
    n = len(squared)
    valid = np.isfinite(squared)
    values = np.where(valid, squared, 0.0)
    mask = valid.astype(float)
    num = np.zeros(n)
    den = np.zeros(n)
    for lag, weight in enumerate(weights):
        if lag >= n:
            break
        if weight == 0.0:
            continue
        num[lag:] += weight * values[: n - lag]
        den[lag:] += weight * mask[: n - lag]
    return num, den


def variance_path(squared_returns: np.ndarray, bandwidth: float, window_bandwidths: float = 5.0,
                  leave_current_out: bool = False) -> np.ndarray:
    """
    Normalized one-sided kernel variance estimate at every position.

    With leave_current_out the squared return at t itself gets zero weight,
    which is the form the bandwidth criterion evaluates.
    """
    weights = kernel_weights(bandwidth, window_bandwidths)
    if leave_current_out:
        weights = weights.copy()
        weights[0] = 0.0
    num, den = _kernel_sums(np.asarray(squared_returns, dtype=float), weights)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, np.nan)


class VolatilityService:
    """
    Spot volatility from squared minute bid returns with a one-sided Gaussian
    kernel; bandwidth chosen per day by ISE on the previous day.
    """

    def __init__(
        self,
        bandwidths: Sequence[float] = DEFAULT_BANDWIDTHS,
        default_bandwidth: float = 60.0,
        window_bandwidths: float = 5.0,
        trim_tail: float = 0.01,
    ):
        if not bandwidths or min(bandwidths) <= 0:
            raise ValidationError("Bandwidth grid must contain positive values")
        self.bandwidths = tuple(float(h) for h in bandwidths)
        self.default_bandwidth = float(default_bandwidth)
        self.window_bandwidths = window_bandwidths
        self.trim_tail = trim_tail

    def spot_variance(self, series: BidSeries, t: pd.Timestamp, bandwidth: float) -> float:
        """Kernel-weighted average of squared returns at minutes l <= t"""
        t = utc(t)
        squared = series.returns[series.log_bid.index <= t].to_numpy() ** 2
        if len(squared) == 0 or not np.isfinite(squared).any():
            raise InsufficientHistoryError(f"{series.exchange_id}: insufficient history before {t}")
        estimate = variance_path(squared, bandwidth, self.window_bandwidths)[-1]
        if np.isnan(estimate):
            raise InsufficientHistoryError(
                f"{series.exchange_id}: no squared return within the kernel window at {t}"
            )
        return float(estimate)

    def _history_start(self, day_start: pd.Timestamp, bandwidth: float) -> pd.Timestamp:
        lags = int(math.ceil(self.window_bandwidths * bandwidth)) + 1
        return day_start - pd.Timedelta(minutes=lags)

    def ise_curve(self, series: BidSeries, day: date) -> dict[float, float]:
        """Integrated squared error of each grid bandwidth on the day before `day`"""
        day_start = utc(day)
        prev_start = day_start - pd.Timedelta(days=1)
        curve = {}
        for h in self.bandwidths:
            window = series.window(self._history_start(prev_start, h), day_start)
            squared = window.returns.to_numpy() ** 2
            estimate = variance_path(squared, h, self.window_bandwidths, leave_current_out=True)
            in_day = np.asarray(window.log_bid.index >= prev_start)
            error = (squared - estimate)[in_day]
            error = error[np.isfinite(error)]
            curve[h] = float(np.sum(error ** 2)) if len(error) else np.nan
        return curve

    def select_bandwidth(self, series: BidSeries, day: date) -> float:
        """ISE-minimizing bandwidth from day T-1, default bandwidth when T-1 is empty"""
        curve = self.ise_curve(series, day)
        finite = {h: v for h, v in curve.items() if np.isfinite(v)}
        if not finite:
            logger.warning(
                f"{series.exchange_id}: no data on the day before {day}, "
                f"using default bandwidth {self.default_bandwidth:g}"
            )
            return self.default_bandwidth
        # ties resolve to the larger bandwidth
        return max(finite, key=lambda h: (-finite[h], h))

    def estimate_day(self, series: BidSeries, day: date, bandwidth: Optional[float] = None) -> SpotVolSeries:
        """
        Per-minute sigma for `day`, using the bandwidth selected on day T-1.

        Only non-positive or missing estimates are flagged here; the 1% tail
        trim runs on the full sample via `trim`.
        """
        h = self.select_bandwidth(series, day) if bandwidth is None else float(bandwidth)
        day_start = utc(day)
        day_end = day_start + pd.Timedelta(days=1)
        window = series.window(self._history_start(day_start, h), day_end)
        variance = variance_path(window.returns.to_numpy() ** 2, h, self.window_bandwidths)
        in_day = np.asarray(window.log_bid.index >= day_start)
        sigma = np.sqrt(np.clip(variance[in_day], 0.0, None))
        index = window.log_bid.index[in_day]
        frame = pd.DataFrame({"sigma": sigma, "bandwidth": h}, index=index)
        frame["trimmed"] = ~(np.isfinite(frame["sigma"]) & (frame["sigma"] > 0))
        logger.debug(f"{series.exchange_id} {day}: bandwidth {h:g}, {int((~frame['trimmed']).sum())} estimates")
        return SpotVolSeries(series.exchange_id, frame, {day: h})

    def trim(self, vol: SpotVolSeries) -> SpotVolSeries:
        """Flag estimates outside the [tail, 1 - tail] quantiles of the positive estimates"""
        frame = vol.frame.copy()
        sigma = frame["sigma"]
        positive = np.isfinite(sigma) & (sigma > 0)
        trimmed = ~positive
        if positive.any():
            low, high = np.quantile(sigma[positive], [self.trim_tail, 1.0 - self.trim_tail])
            trimmed |= (sigma < low) | (sigma > high)
        frame["trimmed"] = trimmed
        return SpotVolSeries(vol.exchange_id, frame, dict(vol.bandwidths))

    def estimate_range(self, series: BidSeries, days: Sequence[date]) -> SpotVolSeries:
        """Estimate several days and trim on their combined distribution"""
        parts = [self.estimate_day(series, d) for d in days]
        if not parts:
            raise ValidationError(f"{series.exchange_id}: empty date range")
        frame = pd.concat([p.frame for p in parts])
        bandwidths = {d: h for p in parts for d, h in p.bandwidths.items()}
        return self.trim(SpotVolSeries(series.exchange_id, frame, bandwidths))


def to_daily(sigma: float | np.ndarray) -> float | np.ndarray:
    """Convert per-square-root-minute volatility to a daily figure"""
    return sigma * np.sqrt(MINUTES_PER_DAY)


# Default service instance
volatility_service = VolatilityService()
