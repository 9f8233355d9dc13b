from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from commands.analysis import (
    EXCESS_COLUMNS,
    _excess_day,
    bound_lookup,
    bound_rows,
    fee_choices,
    optimal_fees,
    sell_bounds,
)
from services.bounds import BASIS_POINTS, BoundInputs, BoundsService, FeeBoundCurve
from services.errors import ValidationError
from services.latency import BlockTimeStats, LatencyModel, latency_service, to_asset_fee, to_fee_per_byte
from services.marketdata import MarketDataService
from tests.synthetic import T0, make_book
from utils import write_csv
from utils.io import read_csv

GOLDEN = Path(__file__).parent / "golden"
SIGMA = {"A": 2.0 ** -10, "B": 2.0 ** -11, "C": 2.0 ** -9}
MINUTES = [T0, T0 + pd.Timedelta(minutes=1)]
# (best bid, best ask), one unit deep
QUOTES = [
    {"A": (100.0, 100.1), "B": (101.0, 101.1), "C": (99.0, 99.1)},
    {"A": (100.0, 100.1), "B": (100.3, 100.4), "C": (99.5, 99.6)},
]
BLOCKS = BlockTimeStats(10.0, 100.0)
TX_BYTES = 250
FEE_SCHEMA = ["intercept", "log1p_fee_per_byte", "log_mempool_size"]


def golden_vol() -> pd.DataFrame:
    rows = [(str(m), m, e, s) for m in MINUTES for e, s in SIGMA.items()]
    return pd.DataFrame(rows, columns=["timestamp", "minute", "exchange", "sigma"])


def golden_buckets() -> dict:
    return {
        minute: [make_book(e, [(bid, 1.0)], [(ask, 1.0)], timestamp=minute) for e, (bid, ask) in quotes.items()]
        for minute, quotes in zip(MINUTES, QUOTES)
    }


def fee_model() -> LatencyModel:
    return LatencyModel("gamma", 0.8, [1.2, -0.35, 0.15], FEE_SCHEMA)


def steep_books(timestamp=T0):
    return [
        make_book("A", [(99.0, 1.0)], [(100.0, 1.0), (100.5, 20.0)], timestamp=timestamp),
        make_book("B", [(103.0, 1.0), (102.9, 20.0)], [(104.0, 1.0)], timestamp=timestamp),
    ]


def test_bounds_match_golden_file(tmp_path):
    # mean 5, variance 575 and gamma 4 make the closed form exactly 10 sigma
    frame = bound_rows(golden_vol(), lambda minute, exchange: (20.0, 5.0, 575.0), BLOCKS,
                       {e: 1 for e in SIGMA}, [4.0])
    written = write_csv(tmp_path / "bounds.csv", frame)
    assert written.read_bytes() == (GOLDEN / "bounds.csv").read_bytes()


def test_share_within_matches_golden_file(tmp_path, zero_fee_profiles):
    bound_map = bound_lookup(read_csv(GOLDEN / "bounds.csv", dtype={"sell_exchange": str}), 4.0)
    excess, shares = _excess_day((golden_buckets(), zero_fee_profiles, bound_map, {}, None))

    written = write_csv(tmp_path / "share_within.csv", shares)
    assert written.read_bytes() == (GOLDEN / "share_within.csv").read_bytes()
    assert list(excess.columns) == EXCESS_COLUMNS
    assert excess[["quantity", "fee", "fee_per_byte"]].isna().all().all()
    within = excess[excess["delta_bp"] > 0].set_index(["timestamp", "buy", "sell"])["within"]
    assert within[(MINUTES[0], "C", "A")] and not within[(MINUTES[0], "A", "B")]
    assert within[(MINUTES[1], "A", "B")] and not within[(MINUTES[1], "C", "B")]


def test_rows_without_latency_moments_are_skipped():
    frame = bound_rows(golden_vol(), lambda minute, exchange: None if exchange == "B" else (20.0, 5.0, 575.0),
                       BLOCKS, {e: 1 for e in SIGMA}, [4.0, 8.0])
    assert set(frame["sell_exchange"]) == {"A", "C"}
    assert len(frame) == 8


def test_fee_unit_conversions():
    assert to_fee_per_byte(0.0005, TX_BYTES) == pytest.approx(200.0, rel=1e-12)
    assert to_asset_fee(200.0, TX_BYTES) == pytest.approx(0.0005, rel=1e-12)
    fees = np.linspace(0.0, 0.01, 11)
    np.testing.assert_allclose(to_asset_fee(to_fee_per_byte(fees, TX_BYTES), TX_BYTES), fees, rtol=1e-12)


def test_fee_bound_curve_matches_fee_response():
    fees = np.linspace(0.0, 0.001, 6)
    curve = FeeBoundCurve(fee_model(), BLOCKS, 4.0, fees, TX_BYTES)
    response = BoundsService().bound_fee_response(
        fee_model(), {"mempool_size": 3000.0}, to_fee_per_byte(fees, TX_BYTES), 0.002, 4.0, BLOCKS, 2
    )
    bound = curve.bound_fn(0.002, 3000.0, 2)
    np.testing.assert_allclose([bound(f) for f in fees], response["bound_bp"] / BASIS_POINTS, rtol=1e-12)
    assert all(np.diff([bound(f) for f in fees]) < 0)

    doubled = curve.bound_fn(0.004, 3000.0, 2)
    assert doubled(fees[3]) == pytest.approx(2.0 * bound(fees[3]), rel=1e-12)
    assert fees[1] < 0.0003 < fees[2]
    assert bound(fees[2]) < bound(0.0003) < bound(fees[1])
    assert curve.unit_bounds(3000.0, 2) is curve.unit_bounds(3000.0, 2)


def test_fee_bound_curve_without_fee_covariate_is_flat():
    model = LatencyModel("gamma", 0.8, [1.2, 0.15], ["intercept", "log_mempool_size"])
    curve = FeeBoundCurve(model, BLOCKS, 4.0, np.linspace(0.0, 0.01, 5), TX_BYTES)
    mean_tau, var_tau = latency_service.predict_moments(model, {"mempool_size": 3000.0})
    m1, m2 = latency_service.total_latency_moments(mean_tau, var_tau, BLOCKS, 3)
    expected = BoundsService().crra_bound(BoundInputs(0.002, 4.0, m1, m2)).d
    bound = curve.bound_fn(0.002, 3000.0, 3)
    assert bound(0.0) == pytest.approx(expected, rel=1e-12)
    assert bound(0.01) == bound(0.0)


def test_fee_bound_curve_rejects_empty_transaction():
    with pytest.raises(ValidationError):
        FeeBoundCurve(fee_model(), BLOCKS, 4.0, [0.0, 0.01], 0)


def test_fee_choices_agree_with_joint_search(zero_fee_profiles):
    profiles = {e: zero_fee_profiles[e] for e in ("A", "B")}
    snaps = steep_books()
    service = MarketDataService()
    matrix = service.difference_matrix(snaps, profiles)

    def bound(f):
        return 0.03 - 2.0 * f

    choices = fee_choices(matrix, snaps, profiles, service, lambda sell: bound)
    expected = service.optimal_quantity_fee(snaps[0], snaps[1], profiles, bound)
    assert len(choices) == 1
    row = choices.iloc[0]
    assert (row["buy"], row["sell"]) == ("A", "B")
    assert (row["quantity"], row["fee"], row["total_return"]) == tuple(expected)
    assert row["fee"] > 0

    assert fee_choices(matrix, snaps, profiles, service, lambda sell: None).empty


def test_optimal_fees_pick_the_best_traded_pair(zero_fee_profiles):
    profiles = {e: zero_fee_profiles[e] for e in ("A", "B")}
    snaps = steep_books()
    settings = {"fee_max": 0.002, "fee_points": 21}
    service = MarketDataService(**settings)
    vol = pd.DataFrame({"timestamp": [str(T0)] * 2, "minute": [T0] * 2, "exchange": ["A", "B"],
                        "sigma": [0.0035, 0.0035]})
    mempool = pd.Series([3000.0], index=pd.DatetimeIndex([T0]))
    confirmations = {"A": 1, "B": 1}

    chosen = optimal_fees(vol, fee_model(), BLOCKS, mempool, confirmations, 4.0,
                          ({T0: snaps}, profiles, settings, TX_BYTES))

    curve = FeeBoundCurve(fee_model(), BLOCKS, 4.0, service.fee_grid(), TX_BYTES)
    bound_for = sell_bounds(curve, {(T0, "B"): 0.0035}, T0, 3000.0, confirmations)
    expected = service.optimal_quantity_fee(snaps[0], snaps[1], profiles, bound_for("B"))
    assert expected.quantity > 0
    assert set(chosen) == {(T0, "B")}
    assert chosen[(T0, "B")] == to_fee_per_byte(expected.fee, TX_BYTES)
    assert np.isclose(chosen[(T0, "B")], to_fee_per_byte(service.fee_grid(), TX_BYTES), rtol=1e-12).any()


def test_excess_rows_carry_the_joint_choice(zero_fee_profiles):
    profiles = {e: zero_fee_profiles[e] for e in ("A", "B")}
    snaps = steep_books()
    settings = {"fee_max": 0.002, "fee_points": 21}
    mempool = pd.Series([3000.0], index=pd.DatetimeIndex([T0]))
    confirmations = {"A": 1, "B": 1}
    fee_inputs = (fee_model(), BLOCKS, 4.0, TX_BYTES, {(T0, "A"): 0.0035, (T0, "B"): 0.0035}, mempool, confirmations)
    bound_map = {T0: {"A": 50.0, "B": 50.0}}

    excess, shares = _excess_day(({T0: snaps}, profiles, bound_map, settings, fee_inputs))
    traded = excess[excess["delta_bp"] > 0]
    assert len(traded) == 1
    row = traded.iloc[0]
    assert (row["buy"], row["sell"]) == ("A", "B")
    assert row["quantity"] > 0
    assert row["fee_per_byte"] == pytest.approx(to_fee_per_byte(row["fee"], TX_BYTES), rel=1e-12)
    assert excess[excess["delta_bp"] <= 0][["quantity", "fee"]].isna().all().all()
    assert list(shares["positive"]) == [1]
