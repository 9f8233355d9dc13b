import math

import numpy as np
import pandas as pd
import pytest

from services.bounds import RESIDUAL_TOLERANCE, ArbBound, BoundInputs, BoundsService, UtilitySpec, bound_bp
from services.errors import ConvergenceError, ValidationError
from services.latency import BlockTimeStats, LatencyModel
from services.marketdata import MarketDataService
from tests.synthetic import TRUE_ALPHA, TRUE_THETA, make_book

BLOCKS = BlockTimeStats(9.7, 94.09)


def closed_form(sigma, gamma, m1, m2):
    return 0.5 * sigma * math.sqrt(gamma * m1 + math.sqrt((gamma * m1) ** 2 + 2 * gamma * (gamma + 1) * (gamma + 2) * m2))


def random_inputs(rng, n, gamma_low=1.01):
    for _ in range(n):
        m1 = rng.uniform(1.0, 100.0)
        yield BoundInputs(
            sigma=rng.uniform(1e-4, 1e-2),
            gamma=rng.uniform(gamma_low, 20.0),
            m1=m1,
            m2=m1 ** 2 + rng.uniform(0.0, 3.0) * m1 ** 2,
        )


def test_cara_bound_example():
    assert BoundsService().cara_bound(BoundInputs(1.0, 1.0, 1.0, 1.0)).d == pytest.approx(0.625)


def test_crra_closed_form_matches_root_finder():
    service = BoundsService()
    rng = np.random.default_rng(0)
    for inputs in random_inputs(rng, 1000):
        d = service.crra_bound(inputs).d
        root = service.ce_root_bound(UtilitySpec("crra", inputs.gamma), inputs)
        assert root == pytest.approx(d, rel=1e-10, abs=1e-12)


def test_cara_closed_form_matches_root_finder():
    service = BoundsService()
    rng = np.random.default_rng(1)
    for inputs in random_inputs(rng, 1000, gamma_low=0.1):
        d = service.cara_bound(inputs).d
        root = service.ce_root_bound(UtilitySpec("cara", inputs.gamma), inputs)
        assert root == pytest.approx(d, rel=1e-8, abs=1e-12)


def test_root_finder_covers_low_risk_aversion():
    inputs = BoundInputs(0.002, 0.5, 20.0, 500.0)
    root = BoundsService().ce_root_bound(UtilitySpec("crra", 0.5), inputs)
    assert root == pytest.approx(closed_form(0.002, 0.5, 20.0, 500.0), rel=1e-9)


def test_root_finder_leaves_a_small_residual():
    service = BoundsService()
    inputs = BoundInputs(0.001, 2.0, 10.0, 200.0)
    utility = UtilitySpec("crra", 2.0)
    root = service.ce_root_bound(utility, inputs)
    moments = inputs.return_moments()[:3]
    assert abs(service._ce_gap(utility, root, inputs, moments)) <= RESIDUAL_TOLERANCE


def test_coarse_bisection_fails_the_residual_check():
    with pytest.raises(ConvergenceError):
        BoundsService(tolerance=1e-3).ce_root_bound(UtilitySpec("crra", 2.0), BoundInputs(0.001, 2.0, 10.0, 200.0))


def test_crra_closed_form_domain():
    service = BoundsService()
    with pytest.raises(ValidationError):
        service.crra_bound(BoundInputs(0.001, 1.0, 10.0, 200.0))
    with pytest.raises(ValidationError):
        service.crra_bound(BoundInputs(0.001, 2.0, 10.0, 200.0, mu=1e-5, third=0.0, fourth=0.0))


@pytest.mark.parametrize("kwargs", [
    {"sigma": -0.1, "gamma": 2.0, "m1": 1.0, "m2": 1.0},
    {"sigma": 0.1, "gamma": 0.0, "m1": 1.0, "m2": 1.0},
    {"sigma": 0.1, "gamma": 2.0, "m1": 0.0, "m2": 1.0},
    {"sigma": 0.1, "gamma": 2.0, "m1": 2.0, "m2": 3.0},
])
def test_bound_inputs_validation(kwargs):
    with pytest.raises(ValidationError):
        BoundInputs(**kwargs)


def test_zero_volatility_gives_zero_bound():
    service = BoundsService()
    inputs = BoundInputs(0.0, 5.0, 10.0, 200.0)
    assert service.crra_bound(inputs).d == 0.0
    assert service.cara_bound(inputs).d == 0.0
    assert service.ce_root_bound(UtilitySpec("crra", 5.0), inputs) == 0.0


def test_crra_bound_increases_in_every_input():
    service = BoundsService()

    def d(**changes):
        base = {"sigma": 0.001, "gamma": 2.0, "m1": 20.0, "m2": 600.0}
        return service.crra_bound(BoundInputs(**{**base, **changes})).d

    for name, values in {
        "sigma": [0.0005, 0.001, 0.002],
        "gamma": [1.5, 2.0, 5.0, 10.0],
        "m1": [10.0, 15.0, 20.0, 24.0],
        "m2": [400.0, 600.0, 1000.0],
    }.items():
        bounds = [d(**{name: v}) for v in values]
        assert all(b > a for a, b in zip(bounds, bounds[1:])), name


def test_drift_root_matches_cara_drift_formula():
    service = BoundsService()
    shape, scale = 0.62, 30.0
    m1 = shape * scale
    variance = shape * scale ** 2
    inputs = BoundInputs(
        sigma=0.002, gamma=3.0, m1=m1, m2=variance + m1 ** 2, mu=-2e-5,
        third=2 * shape * scale ** 3, fourth=3 * shape * (shape + 2) * scale ** 4,
    )
    d = service.cara_bound(inputs).d
    assert d > 0
    assert service.ce_root_bound(UtilitySpec("cara", 3.0), inputs) == pytest.approx(d, rel=1e-8)


def test_large_positive_drift_needs_no_premium():
    inputs = BoundInputs(0.0005, 2.0, 10.0, 100.0, mu=1e-3, third=0.0, fourth=0.0)
    assert BoundsService().ce_root_bound(UtilitySpec("crra", 2.0), inputs) == 0.0


def test_drift_needs_higher_latency_moments():
    with pytest.raises(ValidationError):
        BoundInputs(0.001, 2.0, 10.0, 200.0, mu=1e-5).return_moments()


def test_bp_conversion():
    assert bound_bp(0.0025) == pytest.approx(25.0)
    assert ArbBound(0.0025, BoundInputs(0.001, 2.0, 1.0, 1.0)).bp == pytest.approx(25.0)


def test_decompose_example():
    service = BoundsService()
    result = service.decompose(0.001, 2.0, 10.0, 100.0, BLOCKS, 3)
    assert result.inputs.m1 == pytest.approx(29.4)
    assert result.inputs.m2 == pytest.approx(1340.72)
    assert result.d == pytest.approx(closed_form(0.001, 2.0, 29.4, 1340.72))
    assert 0.0 < result.security_share < 1.0
    assert 0.0 < result.uncertainty_share < 1.0


def test_single_confirmation_has_no_security_share():
    result = BoundsService().decompose(0.001, 2.0, 10.0, 100.0, BLOCKS, 1)
    assert result.security_share == 0.0


def test_decompose_without_volatility_has_no_shares():
    result = BoundsService().decompose(0.0, 2.0, 10.0, 100.0, BLOCKS, 3)
    assert result.d == 0.0
    assert result.security_share is None and result.uncertainty_share is None


def test_confirmation_profile_grows_with_blocks():
    profile = BoundsService().confirmation_profile(0.001, 2.0, 10.0, 100.0, BLOCKS)
    assert profile["confirmations"].tolist() == list(range(1, 11))
    assert np.isnan(profile["increment_bp"].iloc[0])
    assert (profile["increment_bp"].iloc[1:] > 0).all()
    assert (profile["security_share"].diff().iloc[1:] > 0).all()


def test_implied_gamma_inverts_closed_form():
    service = BoundsService()
    rng = np.random.default_rng(2)
    for inputs in random_inputs(rng, 200, gamma_low=1.5):
        d = service.crra_bound(inputs).d
        gamma = service.implied_gamma(d, inputs.sigma, inputs.m1, inputs.m2)
        assert gamma == pytest.approx(inputs.gamma, rel=1e-8)


def test_implied_gamma_rejects_invalid_inputs():
    service = BoundsService()
    with pytest.raises(ValidationError):
        service.implied_gamma(0.0, 0.001, 10.0, 200.0)
    with pytest.raises(ValidationError):
        service.implied_gamma(0.01, 0.0, 10.0, 200.0)
    with pytest.raises(ValidationError):
        service.implied_gamma(0.01, 0.001, 10.0, 50.0)


def test_implied_gamma_market_takes_maximum():
    service = BoundsService()
    small = service.crra_bound(BoundInputs(0.001, 2.0, 10.0, 200.0)).d
    large = service.crra_bound(BoundInputs(0.001, 8.0, 10.0, 200.0)).d
    market = service.implied_gamma_market([
        (small, 0.001, 10.0, 200.0),
        (large, 0.001, 10.0, 200.0),
        (0.0, 0.001, 10.0, 200.0),
        (-0.01, 0.001, 10.0, 200.0),
    ])
    assert market == pytest.approx(8.0, rel=1e-8)
    assert service.implied_gamma_market([(0.0, 0.001, 10.0, 200.0)]) == 0.0


def three_exchange_matrix(zero_fee_profiles):
    snaps = [
        make_book("A", [(100.0, 1.0)], [(101.0, 1.0)]),
        make_book("B", [(103.0, 1.0)], [(104.0, 1.0)]),
        make_book("C", [(99.0, 1.0)], [(100.0, 1.0)]),
    ]
    return MarketDataService().difference_matrix(snaps, zero_fee_profiles)


def test_excess_is_indexed_by_sell_exchange(zero_fee_profiles):
    matrix = three_exchange_matrix(zero_fee_profiles)
    result = BoundsService().excess_differences(matrix, {"A": 0.01, "B": 0.02, "C": 0.0})
    expected = np.zeros((3, 3))
    expected[1, 2] = math.log(1.03) - 0.02
    np.testing.assert_allclose(result.excess, expected, atol=1e-15)
    assert result.exceeds[1, 2] and not result.exceeds[1, 0]
    assert result.share_within == 0.5

    frame = result.to_frame()
    assert len(frame) == 6
    row = frame[(frame["buy"] == "C") & (frame["sell"] == "B")].iloc[0]
    assert row["bound_bp"] == pytest.approx(200.0)
    assert not row["within"]
    assert frame[(frame["buy"] == "A") & (frame["sell"] == "B")]["within"].item()


def test_zero_bounds_pass_differences_through(zero_fee_profiles):
    matrix = three_exchange_matrix(zero_fee_profiles)
    result = BoundsService().excess_differences(matrix, [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(result.excess, matrix.delta)
    assert result.share_within == 0.0


def test_huge_bounds_leave_everything_within(zero_fee_profiles):
    matrix = three_exchange_matrix(zero_fee_profiles)
    result = BoundsService().excess_differences(matrix, [1.0, 1.0, 1.0])
    assert (result.excess == 0).all()
    assert result.share_within == 1.0


def test_no_positive_differences_leaves_share_undefined(zero_fee_profiles):
    snaps = [make_book(e, [(99.0, 1.0)], [(100.0, 1.0)]) for e in "ABC"]
    matrix = MarketDataService().difference_matrix(snaps, zero_fee_profiles)
    assert math.isnan(BoundsService().excess_differences(matrix, [0.0, 0.0, 0.0]).share_within)


def test_excess_rejects_mismatched_bounds(zero_fee_profiles):
    matrix = three_exchange_matrix(zero_fee_profiles)
    with pytest.raises(ValidationError):
        BoundsService().excess_differences(matrix, [0.0, 0.0])
    with pytest.raises(ValidationError):
        BoundsService().excess_differences(matrix, {"A": 0.0})


def fee_model(theta=TRUE_THETA):
    return LatencyModel("gamma", TRUE_ALPHA, theta, ["intercept", "log1p_fee_per_byte", "log_mempool_size"])


def test_bound_decreases_in_settlement_fee():
    curve = BoundsService().bound_fee_response(
        fee_model(), {"mempool_size": 5000}, [1.0, 5.0, 20.0, 100.0, 500.0], 0.001, 2.0, BLOCKS, 3
    )
    assert (curve["bound_bp"].diff().iloc[1:] < 0).all()
    assert (curve["mean_tau"].diff().iloc[1:] < 0).all()


def test_positive_fee_coefficient_warns(mocker):
    logger = mocker.patch("services.bounds.logger")
    theta = np.array([1.19, 0.22, 0.31])
    curve = BoundsService().bound_fee_response(
        fee_model(theta), {"mempool_size": 5000}, [1.0, 10.0], 0.001, 2.0, BLOCKS, 3
    )
    logger.warning.assert_called_once()
    assert curve["bound_bp"].iloc[1] > curve["bound_bp"].iloc[0]


def test_fee_response_needs_fee_covariate():
    model = LatencyModel("gamma", TRUE_ALPHA, [2.0], ["intercept"])
    with pytest.raises(ValidationError):
        BoundsService().bound_fee_response(model, {}, [1.0], 0.001, 2.0, BLOCKS, 3)


def test_summarize_per_sell_exchange():
    frame = pd.DataFrame({
        "sell_exchange": ["A", "A", "A", "B"],
        "bound_bp": [10.0, 20.0, 30.0, 5.0],
        "security_share": [0.1, 0.2, 0.3, 0.0],
        "uncertainty_share": [0.5, 0.5, 0.5, 0.4],
    })
    summary = BoundsService().summarize(frame).set_index("sell_exchange")
    assert summary.loc["A", "n"] == 3
    assert summary.loc["A", "median"] == 20.0
    assert summary.loc["A", "security_share"] == pytest.approx(0.2)
    assert summary.loc["B", "mean"] == 5.0
