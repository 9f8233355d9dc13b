from dataclasses import dataclass, field
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from services.errors import InsufficientDepthError, ValidationError

MAX_DEPTH = 25
# Exchanges without a published requirement get the cross-exchange median.
MEDIAN_CONFIRMATIONS = 3


@dataclass(frozen=True)
class OrderbookSnapshot:
    """
    Price/quantity ladders of one exchange at one point in time.

    Bids are stored in descending, asks in ascending price order. Construction
    validates the book and raises ValidationError on crossed, empty, unsorted
    or non-positive ladders.
    """
    exchange_id: str
    timestamp: pd.Timestamp
    bids: tuple[tuple[float, float], ...]
    asks: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "timestamp", pd.Timestamp(self.timestamp))
        object.__setattr__(self, "bids", tuple((float(p), float(q)) for p, q in self.bids))
        object.__setattr__(self, "asks", tuple((float(p), float(q)) for p, q in self.asks))

        if not self.bids or not self.asks:
            raise ValidationError(f"{self.exchange_id} @ {self.timestamp}: empty book side")
        if len(self.bids) > MAX_DEPTH or len(self.asks) > MAX_DEPTH:
            raise ValidationError(f"{self.exchange_id} @ {self.timestamp}: more than {MAX_DEPTH} levels")
        for side, ladder in (("bid", self.bids), ("ask", self.asks)):
            for price, quantity in ladder:
                if not (np.isfinite(price) and np.isfinite(quantity)) or price <= 0 or quantity <= 0:
                    raise ValidationError(
                        f"{self.exchange_id} @ {self.timestamp}: non-positive {side} level ({price}, {quantity})"
                    )
        bid_prices = [p for p, _ in self.bids]
        ask_prices = [p for p, _ in self.asks]
        if any(a <= b for a, b in zip(bid_prices, bid_prices[1:])):
            raise ValidationError(f"{self.exchange_id} @ {self.timestamp}: bids not strictly descending")
        if any(b <= a for a, b in zip(ask_prices, ask_prices[1:])):
            raise ValidationError(f"{self.exchange_id} @ {self.timestamp}: asks not strictly ascending")
        if self.best_bid > self.best_ask:
            raise ValidationError(
                f"{self.exchange_id} @ {self.timestamp}: crossed book (bid {self.best_bid} > ask {self.best_ask})"
            )

    @property
    def best_bid(self) -> float:
        return self.bids[0][0]

    @property
    def best_ask(self) -> float:
        return self.asks[0][0]

    @property
    def bid_depth(self) -> float:
        return sum(q for _, q in self.bids)

    @property
    def ask_depth(self) -> float:
        return sum(q for _, q in self.asks)


@dataclass(frozen=True)
class ExchangeProfile:
    """Fee schedule and deposit security requirement of one exchange"""
    exchange_id: str
    taker_fee: float = 0.0
    withdrawal_fee: Optional[float] = None
    confirmations: Optional[int] = None
    margin_flag: bool = False
    business_flag: bool = False

    def __post_init__(self):
        if self.taker_fee < 0:
            raise ValidationError(f"{self.exchange_id}: taker fee must be non-negative")
        if self.withdrawal_fee is not None and self.withdrawal_fee < 0:
            raise ValidationError(f"{self.exchange_id}: withdrawal fee must be non-negative")
        if self.confirmations is not None and self.confirmations < 1:
            raise ValidationError(f"{self.exchange_id}: confirmations must be at least 1")

    @property
    def effective_withdrawal_fee(self) -> float:
        return 0.0 if self.withdrawal_fee is None else float(self.withdrawal_fee)

    @property
    def effective_confirmations(self) -> int:
        return MEDIAN_CONFIRMATIONS if self.confirmations is None else int(self.confirmations)


@dataclass
class PriceDifferenceMatrix:
    """
    Cost-adjusted log price differences between all exchange pairs at one minute.

    Entry (i, j) is the return of buying on exchange j and selling on
    exchange i. Rows and columns of exchanges without a usable snapshot are NaN.
    """
    timestamp: pd.Timestamp
    exchanges: list[str]
    delta: np.ndarray
    quantity: np.ndarray
    metadata: dict = field(default_factory=dict)

    def pairs(self):
        """Yield (buy, sell, delta, quantity) for every off-diagonal, non-missing entry"""
        for i, sell in enumerate(self.exchanges):
            for j, buy in enumerate(self.exchanges):
                if i == j or np.isnan(self.delta[i, j]):
                    continue
                yield buy, sell, float(self.delta[i, j]), float(self.quantity[i, j])


class QuantityChoice(NamedTuple):
    quantity: float
    total_return: float


class FeeChoice(NamedTuple):
    quantity: float
    fee: float
    total_return: float


def _ladder(ladder: Sequence[tuple[float, float]]) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(ladder, dtype=float).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ValidationError("Ladder is empty")
    return arr[:, 0], arr[:, 1]


def _average_prices(ladder: Sequence[tuple[float, float]], quantities: np.ndarray) -> np.ndarray:
    """Volume-weighted execution price of each quantity, NaN beyond the ladder depth"""
    prices, sizes = _ladder(ladder)
    cum_qty = np.cumsum(sizes)
    cum_notional = np.cumsum(prices * sizes)
    quantities = np.asarray(quantities, dtype=float)

    idx = np.searchsorted(cum_qty, quantities, side="left")
    inside = (quantities > 0) & (idx < len(prices))
    idx = np.minimum(idx, len(prices) - 1)
    prev_qty = np.where(idx > 0, cum_qty[idx - 1], 0.0)
    prev_notional = np.where(idx > 0, cum_notional[idx - 1], 0.0)
    notional = prev_notional + (quantities - prev_qty) * prices[idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        average = notional / quantities
    return np.where(inside, average, np.nan)


def _fee_factor(side: str, taker_fee: float) -> float:
    if side == "ask":
        return 1.0 + taker_fee
    if side == "bid":
        return 1.0 - taker_fee
    raise ValidationError(f"Unknown book side: {side!r}")


def walk_book(
    ladder: Sequence[tuple[float, float]],
    quantity: float,
    taker_fee: float = 0.0,
    side: str = "ask",
) -> float:
    """
    Average per-unit price of executing `quantity` against a ladder.

    Args:
        ladder: (price, quantity) levels, best price first
        quantity: units to execute, must be positive
        taker_fee: proportional fee applied multiplicatively
        side: "ask" when buying (fee raises the price), "bid" when selling

    Returns:
        Fee-adjusted volume-weighted average price
    """
    if quantity <= 0:
        raise ValidationError(f"Quantity must be positive, got {quantity}")
    factor = _fee_factor(side, taker_fee)
    average = _average_prices(ladder, np.array([quantity]))[0]
    if np.isnan(average):
        depth = float(np.sum(_ladder(ladder)[1]))
        raise InsufficientDepthError(f"Insufficient depth: {quantity} requested, {depth} available")
    return float(average * factor)


def rho_ask(ladder, quantities, taker_fee: float = 0.0) -> np.ndarray:
    """Proportional buy-side cost: A(q) / A - 1, fees included"""
    best = _ladder(ladder)[0][0]
    return _average_prices(ladder, quantities) * (1.0 + taker_fee) / best - 1.0


def rho_bid(ladder, quantities, taker_fee: float = 0.0) -> np.ndarray:
    """Proportional sell-side cost: 1 - B(q) / B, fees included"""
    best = _ladder(ladder)[0][0]
    return 1.0 - _average_prices(ladder, quantities) * (1.0 - taker_fee) / best


class MarketDataService:
    """
    Cost-adjusted cross-exchange price differences and return-maximizing
    trade quantities and settlement fees.

    All methods are pure functions of their arguments and the grid settings
    held by the instance.
    """

    def __init__(
        self,
        quantity_points: int = 200,
        fee_points: int = 41,
        fee_max: float = 0.01,
        deduct_withdrawal_fee: bool = False,
        stale_seconds: int = 60,
    ):
        if quantity_points < 2 or fee_points < 2:
            raise ValidationError("Quantity and fee grids need at least 2 points")
        self.quantity_points = quantity_points
        self.fee_points = fee_points
        self.fee_max = fee_max
        self.deduct_withdrawal_fee = deduct_withdrawal_fee
        self.stale_seconds = stale_seconds

    @property
    def metadata(self) -> dict:
        return {
            "quantity_points": self.quantity_points,
            "quantity_spacing": "geometric",
            "fee_points": self.fee_points,
            "fee_max": self.fee_max,
            "deduct_withdrawal_fee": self.deduct_withdrawal_fee,
        }

    def _legs(self, buy_book: OrderbookSnapshot, sell_book: OrderbookSnapshot, profiles: Mapping[str, ExchangeProfile]):
        try:
            buy_profile = profiles[buy_book.exchange_id]
            sell_profile = profiles[sell_book.exchange_id]
        except KeyError as e:
            raise ValidationError(f"No exchange profile for {e.args[0]}") from e
        return buy_profile, sell_profile

    def _sold(self, quantities: np.ndarray, withdrawal_fee: float) -> np.ndarray:
        if self.deduct_withdrawal_fee:
            return np.maximum(quantities - withdrawal_fee, 0.0)
        return quantities

    def _totals(self, buy_book, sell_book, buy_profile, sell_profile, bought: np.ndarray, sold: np.ndarray):
        """Proceeds and cost arrays (NaN beyond depth) for bought/sold quantity arrays"""
        sell_price = _average_prices(sell_book.bids, sold) * (1.0 - sell_profile.taker_fee)
        buy_price = _average_prices(buy_book.asks, bought) * (1.0 + buy_profile.taker_fee)
        proceeds = np.where(sold > 0, sell_price * sold, 0.0)
        return proceeds, buy_price * bought

    def price_difference(
        self,
        buy_book: OrderbookSnapshot,
        sell_book: OrderbookSnapshot,
        profiles: Mapping[str, ExchangeProfile],
        quantity: float,
    ) -> Optional[float]:
        """
        Cost-adjusted log return of buying `quantity` on the buy book and
        selling it on the sell book.

        Returns None (no trade) when the quantity does not exceed the
        buy-side withdrawal fee.
        """
        buy_profile, sell_profile = self._legs(buy_book, sell_book, profiles)
        withdrawal_fee = buy_profile.effective_withdrawal_fee
        if quantity <= withdrawal_fee:
            return None
        buy_price = walk_book(buy_book.asks, quantity, buy_profile.taker_fee, side="ask")
        sold = float(self._sold(np.array([quantity]), withdrawal_fee)[0])
        sell_price = walk_book(sell_book.bids, sold, sell_profile.taker_fee, side="bid")
        return float(np.log(sell_price * sold) - np.log(buy_price * quantity))

    def trade_condition(
        self,
        buy_book: OrderbookSnapshot,
        sell_book: OrderbookSnapshot,
        profiles: Mapping[str, ExchangeProfile],
        quantity: float,
        bound: float,
    ) -> bool:
        """True when the cost-adjusted return of `quantity` strictly exceeds the bound"""
        delta = self.price_difference(buy_book, sell_book, profiles, quantity)
        return delta is not None and delta > bound

    def quantity_grid(self, buy_book: OrderbookSnapshot, sell_book: OrderbookSnapshot) -> np.ndarray:
        """Geometric grid from the smallest level size to the common depth"""
        sizes = [q for _, q in buy_book.asks] + [q for _, q in sell_book.bids]
        low = min(sizes)
        high = min(buy_book.ask_depth, sell_book.bid_depth)
        if low >= high:
            return np.array([high])
        return np.geomspace(low, high, self.quantity_points)

    def optimal_quantity(
        self,
        buy_book: OrderbookSnapshot,
        sell_book: OrderbookSnapshot,
        profiles: Mapping[str, ExchangeProfile],
    ) -> QuantityChoice:
        """Grid quantity maximizing proceeds minus cost after taker fees"""
        buy_profile, sell_profile = self._legs(buy_book, sell_book, profiles)
        withdrawal_fee = buy_profile.effective_withdrawal_fee
        grid = self.quantity_grid(buy_book, sell_book)
        proceeds, cost = self._totals(
            buy_book, sell_book, buy_profile, sell_profile, grid, self._sold(grid, withdrawal_fee)
        )
        total = np.nan_to_num(proceeds - cost, nan=-np.inf)

        best = int(np.argmax(total))
        if total[best] <= 0 or grid[best] <= withdrawal_fee:
            return QuantityChoice(0.0, 0.0)
        return QuantityChoice(float(grid[best]), float(total[best]))

    def fee_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.fee_max, self.fee_points)

    def fee_grid_search(
        self,
        buy_book: OrderbookSnapshot,
        sell_book: OrderbookSnapshot,
        profiles: Mapping[str, ExchangeProfile],
        bound_fn: Callable[[float], float],
        fees: Optional[np.ndarray] = None,
    ) -> FeeChoice:
        """
        Exhaustive (q, f) grid maximization of total return subject to the
        net return covering the fee-dependent bound d(f).
        """
        buy_profile, sell_profile = self._legs(buy_book, sell_book, profiles)
        withdrawal_fee = buy_profile.effective_withdrawal_fee
        fees = self.fee_grid() if fees is None else np.asarray(fees, dtype=float)
        grid = self.quantity_grid(buy_book, sell_book)
        sold = self._sold(grid, withdrawal_fee)

        bought = grid[None, :] + fees[:, None]
        proceeds, cost = self._totals(buy_book, sell_book, buy_profile, sell_profile, bought, sold[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            net_delta = np.log(proceeds / sold[None, :]) - np.log(cost / bought)
        bounds = np.array([bound_fn(float(f)) for f in fees])
        total = proceeds - cost

        feasible = (
            np.isfinite(total)
            & (total > 0)
            & (net_delta >= bounds[:, None])
            & (grid[None, :] > withdrawal_fee)
        )
        if not feasible.any():
            return FeeChoice(0.0, 0.0, 0.0)
        masked = np.where(feasible, total, -np.inf)
        f_idx, q_idx = np.unravel_index(int(np.argmax(masked)), masked.shape)
        return FeeChoice(float(grid[q_idx]), float(fees[f_idx]), float(total[f_idx, q_idx]))

    def fee_conditions_hold(
        self,
        sell_book: OrderbookSnapshot,
        sell_profile: ExchangeProfile,
        quantity: float,
        fee: float,
        bound_fn: Callable[[float], float],
        grid: np.ndarray,
        fees: np.ndarray,
    ) -> bool:
        """
        Necessary conditions for paying a positive settlement fee, evaluated
        with one-step finite differences on the grids.
        """
        q_idx = int(np.argmin(np.abs(grid - quantity)))
        f_idx = int(np.argmin(np.abs(fees - fee)))
        q_next = grid[min(q_idx + 1, len(grid) - 1)]
        q_prev = grid[max(q_idx - 1, 0)]
        rho = rho_bid(sell_book.bids, np.array([q_prev, quantity, q_next]), sell_profile.taker_fee)
        if q_next > q_prev:
            rho_slope = (rho[2] - rho[0]) / (q_next - q_prev)
        else:
            rho_slope = 0.0
        f_next = fees[min(f_idx + 1, len(fees) - 1)]
        f_prev = fees[max(f_idx - 1, 0)]
        bound_slope = (bound_fn(float(f_next)) - bound_fn(float(f_prev))) / (f_next - f_prev)

        average_exceeds_marginal = (1.0 - rho[1]) / quantity > rho_slope
        bound_reduction_pays = -bound_slope > rho_slope / (1.0 + rho[1])
        return bool(average_exceeds_marginal and bound_reduction_pays)

    def optimal_quantity_fee(
        self,
        buy_book: OrderbookSnapshot,
        sell_book: OrderbookSnapshot,
        profiles: Mapping[str, ExchangeProfile],
        bound_fn: Callable[[float], float],
        fees: Optional[np.ndarray] = None,
    ) -> FeeChoice:
        """
        Joint choice of trade quantity and settlement fee (paid in the asset on
        the buy side). A positive fee is kept only when the fee-choice
        necessary conditions hold at the grid optimum; otherwise the best
        zero-fee point is returned.
        """
        fees = self.fee_grid() if fees is None else np.asarray(fees, dtype=float)
        choice = self.fee_grid_search(buy_book, sell_book, profiles, bound_fn, fees)
        if choice.fee <= 0 or choice.quantity <= 0:
            return choice

        _, sell_profile = self._legs(buy_book, sell_book, profiles)
        grid = self.quantity_grid(buy_book, sell_book)
        if self.fee_conditions_hold(sell_book, sell_profile, choice.quantity, choice.fee, bound_fn, grid, fees):
            return choice
        logger.debug(f"Fee conditions fail at q={choice.quantity:.6g}, f={choice.fee:.6g}; falling back to f=0")
        return self.fee_grid_search(buy_book, sell_book, profiles, bound_fn, fees[:1] * 0.0)

    def binding_residual(
        self,
        buy_book: OrderbookSnapshot,
        sell_book: OrderbookSnapshot,
        profiles: Mapping[str, ExchangeProfile],
        bound_fn: Callable[[float], float],
        choice: FeeChoice,
    ) -> tuple[float, bool]:
        """
        Slack of the bound constraint at a chosen (q, f) and whether it binds
        within one quantity grid step (the next grid quantity is infeasible or
        does not raise the total return).
        """
        buy_profile, sell_profile = self._legs(buy_book, sell_book, profiles)
        grid = self.quantity_grid(buy_book, sell_book)
        bound = bound_fn(choice.fee)

        def evaluate(q):
            bought = np.array([q + choice.fee])
            sold = self._sold(np.array([q]), buy_profile.effective_withdrawal_fee)
            proceeds, cost = self._totals(buy_book, sell_book, buy_profile, sell_profile, bought, sold)
            net = np.log(proceeds[0] / sold[0]) - np.log(cost[0] / bought[0])
            return net, proceeds[0] - cost[0]

        net, total = evaluate(choice.quantity)
        residual = float(net - bound)
        q_idx = int(np.argmin(np.abs(grid - choice.quantity)))
        if q_idx + 1 >= len(grid):
            return residual, True
        next_net, next_total = evaluate(grid[q_idx + 1])
        blocked = (not np.isfinite(next_total)) or next_net < bound or next_total <= total
        return residual, bool(blocked)

    def difference_matrix(
        self,
        snapshots: Sequence[OrderbookSnapshot],
        profiles: Mapping[str, ExchangeProfile],
        exchanges: Optional[Sequence[str]] = None,
        best_quotes: bool = False,
    ) -> PriceDifferenceMatrix:
        """
        Matrix of non-negative cost-adjusted price differences for one minute.

        Args:
            snapshots: at most one snapshot per exchange, sharing a timestamp
            profiles: exchange profiles keyed by exchange id
            exchanges: row/column order; defaults to the sorted profile ids
            best_quotes: use best bid/ask without fees or depth instead of
                the return-maximizing quantity
        """
        books = {s.exchange_id: s for s in snapshots}
        if len(books) < 2:
            raise ValidationError(f"Need at least 2 exchanges for a difference matrix, got {len(books)}")
        exchanges = list(exchanges) if exchanges is not None else sorted(profiles)
        timestamps = {s.timestamp for s in snapshots}
        if len(timestamps) > 1:
            raise ValidationError(f"Snapshots do not share a timestamp: {sorted(timestamps)}")

        n = len(exchanges)
        delta = np.full((n, n), np.nan)
        quantity = np.full((n, n), np.nan)
        for i, sell in enumerate(exchanges):
            for j, buy in enumerate(exchanges):
                if sell not in books or buy not in books:
                    continue
                if i == j:
                    delta[i, j] = quantity[i, j] = 0.0
                    continue
                buy_book, sell_book = books[buy], books[sell]
                if best_quotes:
                    delta[i, j] = max(0.0, float(np.log(sell_book.best_bid) - np.log(buy_book.best_ask)))
                    quantity[i, j] = min(sell_book.bids[0][1], buy_book.asks[0][1])
                    continue
                choice = self.optimal_quantity(buy_book, sell_book, profiles)
                if choice.quantity <= 0:
                    delta[i, j] = quantity[i, j] = 0.0
                    continue
                value = self.price_difference(buy_book, sell_book, profiles, choice.quantity)
                delta[i, j] = max(0.0, value) if value is not None else 0.0
                quantity[i, j] = choice.quantity

        return PriceDifferenceMatrix(
            timestamp=next(iter(timestamps)),
            exchanges=exchanges,
            delta=delta,
            quantity=quantity,
            metadata={**self.metadata, "best_quotes": best_quotes},
        )

    def align_snapshots(
        self, snapshots: Sequence[OrderbookSnapshot]
    ) -> dict[pd.Timestamp, list[OrderbookSnapshot]]:
        """
        Group snapshots into UTC minute buckets.

        The latest snapshot of an exchange inside a bucket wins. Buckets without
        a fresh snapshot reuse the previous one only while it is at most
        `stale_seconds` old relative to the bucket start; older books count as
        missing. Reused books are re-stamped with the bucket time.
        """
        by_exchange: dict[str, dict[pd.Timestamp, OrderbookSnapshot]] = {}
        for snap in sorted(snapshots, key=lambda s: (s.exchange_id, s.timestamp)):
            by_exchange.setdefault(snap.exchange_id, {})[snap.timestamp.floor("min")] = snap
        if not by_exchange:
            return {}

        minutes = sorted({m for buckets in by_exchange.values() for m in buckets})
        grid = pd.date_range(minutes[0], minutes[-1], freq="min")
        limit = pd.Timedelta(seconds=self.stale_seconds)
        aligned: dict[pd.Timestamp, list[OrderbookSnapshot]] = {m: [] for m in grid}
        for exchange_id in sorted(by_exchange):
            buckets = by_exchange[exchange_id]
            last = None
            for minute in grid:
                if minute in buckets:
                    last = buckets[minute]
                elif last is None or minute - last.timestamp > limit:
                    continue
                aligned[minute].append(
                    OrderbookSnapshot(exchange_id, minute, last.bids, last.asks)
                )
        return aligned


# Default service instance
marketdata_service = MarketDataService()
