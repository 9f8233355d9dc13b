import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy import optimize

from services.errors import ConvergenceError, ValidationError
from services.latency import BlockTimeStats, LatencyModel, latency_service, to_fee_per_byte
from services.marketdata import PriceDifferenceMatrix

BASIS_POINTS = 1e4
TAYLOR_ORDER = 4
ROOT_TOLERANCE = 1e-15
RESIDUAL_TOLERANCE = 1e-9
BRACKET_CAP = 200
FEE_COVARIATE = "log1p_fee_per_byte"


def bound_bp(d: float) -> float:
    """Log-return bound in basis points"""
    return d * BASIS_POINTS


@dataclass(frozen=True)
class UtilitySpec:
    """
    Utility family used for certainty equivalents.

    kind: "crra", "cara" or "linear". CRRA derivative ratios are taken at the
    return itself, U^(k)/U' = (-1)^(k-1) g(g+1)...(g+k-2) / x^(k-1); CARA ratios
    are (-g)^(k-1). Full utilities are normalized to U(0) = 0: CRRA acts on
    wealth 1 + r, CARA on r.
    """
    kind: str = "crra"
    gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in ("crra", "cara", "linear"):
            raise ValidationError(f"Unknown utility kind: {self.kind}")
        if self.kind != "linear" and not self.gamma > 0:
            raise ValidationError(f"Risk aversion must be positive, got {self.gamma}")

    def ratio(self, k: int, x: float) -> float:
        """U^(k)(x) / U'(x)"""
        if self.kind == "linear":
            return 0.0
        if self.kind == "cara":
            return (-self.gamma) ** (k - 1)
        if x <= 0:
            return -math.inf if k % 2 == 0 else math.inf
        rising = math.prod(self.gamma + i for i in range(k - 1))
        return (-1) ** (k - 1) * rising / x ** (k - 1)

    def ratio_derivative(self, k: int, x: float) -> float:
        """d/dx of U^(k)(x) / U'(x)"""
        if self.kind != "crra":
            return 0.0
        rising = math.prod(self.gamma + i for i in range(k - 1))
        return (-1) ** k * (k - 1) * rising / x ** k

    def value(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.kind == "linear":
            return r
        if self.kind == "cara":
            return -np.expm1(-self.gamma * r) / self.gamma
        if self.gamma == 1.0:
            return np.log1p(r)
        a = 1.0 - self.gamma
        return np.expm1(a * np.log1p(r)) / a

    def inverse(self, u: float) -> float:
        if self.kind == "linear":
            return u
        if self.kind == "cara":
            return -math.log1p(-self.gamma * u) / self.gamma
        if self.gamma == 1.0:
            return math.expm1(u)
        a = 1.0 - self.gamma
        return math.expm1(math.log1p(a * u) / a)

    def marginal(self, r: float) -> float:
        if self.kind == "linear":
            return 1.0
        if self.kind == "cara":
            return math.exp(-self.gamma * r)
        return (1.0 + r) ** (-self.gamma)


@dataclass(frozen=True)
class BoundInputs:
    """
    sigma per square-root minute, latency moments m1 (minutes) and m2
    (minutes^2), drift mu per minute. `third` and `fourth` are the central
    latency moments, needed only when mu != 0.
    """
    sigma: float
    gamma: float
    m1: float
    m2: float
    mu: float = 0.0
    third: Optional[float] = None
    fourth: Optional[float] = None

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValidationError(f"Volatility must be non-negative, got {self.sigma}")
        if not self.gamma > 0:
            raise ValidationError(f"Risk aversion must be positive, got {self.gamma}")
        if not self.m1 > 0:
            raise ValidationError(f"Mean latency must be positive, got {self.m1}")
        if self.m2 < self.m1 ** 2 * (1.0 - 1e-12):
            raise ValidationError(f"Second latency moment {self.m2} is below m1^2 = {self.m1 ** 2}")

    @property
    def latency_variance(self) -> float:
        return max(0.0, self.m2 - self.m1 ** 2)

    def return_moments(self) -> tuple[float, float, float]:
        """Central moments of order 2..4 of the settlement-period return"""
        s2 = self.sigma ** 2
        if self.mu == 0.0:
            return s2 * self.m1, 0.0, 3.0 * s2 ** 2 * self.m2
        if self.third is None or self.fourth is None:
            raise ValidationError("Drift requires the third and fourth central latency moments")
        mu, v = self.mu, self.latency_variance
        second = v * mu ** 2 + s2 * self.m1
        third = 3.0 * mu * s2 * v + mu ** 3 * self.third
        # E[(tau - m1)^2 tau] = third + m1 * v
        fourth = mu ** 4 * self.fourth + 3.0 * s2 ** 2 * self.m2 + 6.0 * s2 * mu ** 2 * (self.third + self.m1 * v)
        return second, third, fourth


@dataclass
class ArbBound:
    d: float
    inputs: BoundInputs
    security_share: Optional[float] = None
    uncertainty_share: Optional[float] = None

    @property
    def bp(self) -> float:
        return bound_bp(self.d)


@dataclass
class ExcessDifferences:
    """Excess over bounds for one matrix; `exceeds` is the indicator 1{delta > d_sell}"""
    timestamp: pd.Timestamp
    exchanges: list[str]
    excess: np.ndarray
    exceeds: np.ndarray
    delta: np.ndarray
    bounds: np.ndarray
    share_within: float = math.nan

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, sell in enumerate(self.exchanges):
            for j, buy in enumerate(self.exchanges):
                if i == j or np.isnan(self.excess[i, j]):
                    continue
                rows.append({
                    "timestamp": self.timestamp,
                    "buy": buy,
                    "sell": sell,
                    "delta_bp": bound_bp(self.delta[i, j]),
                    "bound_bp": bound_bp(self.bounds[i]),
                    "excess_bp": bound_bp(self.excess[i, j]),
                    "within": bool(self.delta[i, j] > 0 and not self.exceeds[i, j]),
                })
        return pd.DataFrame(rows, columns=["timestamp", "buy", "sell", "delta_bp", "bound_bp", "excess_bp", "within"])


class BoundsService:
    """Arbitrage bounds from spot volatility and settlement latency moments"""

    def __init__(self, tolerance: float = ROOT_TOLERANCE, bracket_cap: int = BRACKET_CAP):
        self.tolerance = tolerance
        self.bracket_cap = bracket_cap

    def crra_bound(self, inputs: BoundInputs) -> ArbBound:
        """Closed-form CRRA bound without drift"""
        if inputs.gamma <= 1:
            raise ValidationError(
                f"Closed-form CRRA bound needs gamma > 1, got {inputs.gamma}; use ce_root_bound"
            )
        if inputs.mu != 0.0:
            raise ValidationError("Closed-form CRRA bound assumes zero drift; use ce_root_bound")
        g, m1, m2 = inputs.gamma, inputs.m1, inputs.m2
        inner = g * m1 + math.sqrt((g * m1) ** 2 + 2.0 * g * (g + 1.0) * (g + 2.0) * m2)
        return ArbBound(0.5 * inputs.sigma * math.sqrt(inner), inputs)

    def cara_bound(self, inputs: BoundInputs) -> ArbBound:
        """
        Exponential-utility bound. Without drift d = g/2 s^2 m1 + g^3/8 s^4 m2;
        with drift the bound solves d + m1 mu - g/2 M2 + g^2/6 M3 - g^3/24 M4 = 0
        for the central return moments M2..M4, floored at zero.
        """
        g = inputs.gamma
        second, third, fourth = inputs.return_moments()
        d = -inputs.m1 * inputs.mu + g / 2.0 * second - g ** 2 / 6.0 * third + g ** 3 / 24.0 * fourth
        return ArbBound(max(0.0, d), inputs)

    def _ce_gap(self, utility: UtilitySpec, d: float, inputs: BoundInputs, moments: Sequence[float]) -> float:
        x = d + inputs.m1 * inputs.mu
        total = x
        for k, moment in enumerate(moments, start=2):
            if moment == 0.0:
                continue
            ratio = utility.ratio(k, x)
            if not math.isfinite(ratio):
                return -math.inf
            total += ratio / math.factorial(k) * moment
        return total

    def ce_root_bound(self, utility: UtilitySpec, inputs: BoundInputs) -> float:
        """
        Smallest price difference with a non-negative order-4 certainty equivalent.

        F(d) = x + sum_k U^(k)(x)/U'(x) M_k / k! with x = d + m1 mu is
        increasing, so the root is bracketed by doubling from sigma sqrt(m2)
        and refined by bisection; the root must leave a residual below
        RESIDUAL_TOLERANCE.
        """
        moments = inputs.return_moments()[: TAYLOR_ORDER - 1]

        def gap(d):
            return self._ce_gap(utility, d, inputs, moments)

        if gap(0.0) >= 0:
            return 0.0
        lo = 0.0
        hi = max(inputs.sigma * math.sqrt(inputs.m2), abs(inputs.m1 * inputs.mu), 1e-12)
        for _ in range(self.bracket_cap):
            if gap(hi) > 0:
                break
            lo, hi = hi, hi * 2.0
        else:
            raise ConvergenceError(
                "No sign change while bracketing the certainty-equivalent root",
                {"utility": utility.kind, "gamma": utility.gamma, "hi": hi, "gap": gap(hi)},
            )

        root, result = optimize.bisect(gap, lo, hi, xtol=self.tolerance, maxiter=self.bracket_cap * 4,
                                       full_output=True, disp=False)
        residual = gap(root)
        if not result.converged or not abs(residual) <= RESIDUAL_TOLERANCE:
            raise ConvergenceError(
                "Bisection of the certainty-equivalent root did not converge",
                {"utility": utility.kind, "gamma": utility.gamma, "root": root, "residual": residual,
                 "iterations": result.iterations},
            )
        return float(root)

    def excess_differences(
        self, matrix: PriceDifferenceMatrix, bounds: Mapping[str, float] | Sequence[float]
    ) -> ExcessDifferences:
        """
        (delta - d_sell) 1{delta > d_sell} for every entry; d is indexed by the
        sell-side row. Share within bounds is the fraction of positive
        differences with indicator 0.
        """
        n = len(matrix.exchanges)
        if isinstance(bounds, Mapping):
            missing = [e for e in matrix.exchanges if e not in bounds]
            if missing:
                raise ValidationError(f"No bound for exchanges: {missing}")
            d = np.array([bounds[e] for e in matrix.exchanges], dtype=float)
        else:
            d = np.asarray(bounds, dtype=float)
        if d.shape != (n,) or matrix.delta.shape != (n, n):
            raise ValidationError(f"Bounds of shape {d.shape} do not match a {n}x{n} matrix")

        delta = matrix.delta
        with np.errstate(invalid="ignore"):
            exceeds = delta > d[:, None]
            excess = np.where(exceeds, delta - d[:, None], 0.0)
        excess = np.where(np.isnan(delta) | np.isnan(d)[:, None], np.nan, excess)

        off_diagonal = ~np.eye(n, dtype=bool) & np.isfinite(delta) & np.isfinite(d)[:, None]
        positive = off_diagonal & (np.nan_to_num(delta) > 0)
        share = float(np.mean(~exceeds[positive])) if positive.any() else math.nan
        return ExcessDifferences(matrix.timestamp, list(matrix.exchanges), excess, exceeds, delta, d, share)

    def decompose(
        self,
        sigma: float,
        gamma: float,
        mean_tau: float,
        var_tau: float,
        blocks: BlockTimeStats,
        confirmations: int,
    ) -> ArbBound:
        """
        CRRA bound with its security share 1 - d(B=1)/d(B) and uncertainty
        share 1 - d(no latency variance)/d. Shares are None when d = 0.
        """
        def bound(b, v_tau, v_block):
            m1, m2 = latency_service.total_latency_moments(
                mean_tau, v_tau, BlockTimeStats(blocks.mean, v_block), b
            )
            return self.crra_bound(BoundInputs(sigma, gamma, m1, m2))

        full = bound(confirmations, var_tau, blocks.variance)
        if full.d <= 0:
            return full
        full.security_share = 1.0 - bound(1, var_tau, blocks.variance).d / full.d
        full.uncertainty_share = 1.0 - bound(confirmations, 0.0, 0.0).d / full.d
        return full

    def confirmation_profile(
        self,
        sigma: float,
        gamma: float,
        mean_tau: float,
        var_tau: float,
        blocks: BlockTimeStats,
        max_confirmations: int = 10,
    ) -> pd.DataFrame:
        """Bounds for B = 1..max_confirmations and the per-block increments"""
        rows = []
        for b in range(1, max_confirmations + 1):
            result = self.decompose(sigma, gamma, mean_tau, var_tau, blocks, b)
            rows.append({
                "confirmations": b,
                "m1": result.inputs.m1,
                "m2": result.inputs.m2,
                "bound_bp": result.bp,
                "security_share": result.security_share,
                "uncertainty_share": result.uncertainty_share,
            })
        profile = pd.DataFrame(rows)
        profile["increment_bp"] = profile["bound_bp"].diff()
        return profile

    def implied_gamma(self, delta: float, sigma: float, c1: float, c2: float) -> float:
        """
        Risk aversion at which `delta` is exactly the CRRA bound: the positive
        root of d^4 - s^2 c1 d^2 g/2 - s^4 c2 g(g+1)(g+2)/8, which is unique
        because the cubic decreases on g > 0.
        """
        if not delta > 0:
            raise ValidationError(f"Implied risk aversion needs a positive difference, got {delta}")
        if not sigma > 0 or not c1 > 0 or c2 < c1 ** 2 * (1.0 - 1e-12):
            raise ValidationError("Implied risk aversion needs sigma > 0, c1 > 0 and c2 >= c1^2")
        s2, d2 = sigma ** 2, delta ** 2
        a = s2 ** 2 * c2 / 8.0

        def cubic(g):
            return d2 ** 2 - 0.5 * s2 * c1 * d2 * g - a * g * (g + 1.0) * (g + 2.0)

        hi = 1.0
        for _ in range(self.bracket_cap):
            if cubic(hi) < 0:
                break
            hi *= 2.0
        else:
            raise ConvergenceError("No positive root of the implied risk aversion cubic", {"delta": delta, "hi": hi})
        return float(optimize.brentq(cubic, 0.0, hi, xtol=1e-300, rtol=4.0 * np.finfo(float).eps, maxiter=500))

    def implied_gamma_market(self, candidates: Iterable[tuple[float, float, float, float]]) -> float:
        """Largest implied risk aversion over (delta, sigma, c1, c2) pairs; pairs with delta <= 0 are skipped"""
        values = [self.implied_gamma(*c) for c in candidates if c[0] > 0]
        return max(values) if values else 0.0

    def bound_fee_response(
        self,
        model: LatencyModel,
        covariates: Mapping[str, float],
        fees: Sequence[float],
        sigma: float,
        gamma: float,
        blocks: BlockTimeStats,
        confirmations: int,
    ) -> pd.DataFrame:
        """CRRA bound as a function of the settlement fee per byte"""
        if FEE_COVARIATE not in model.schema:
            raise ValidationError("Latency model has no fee covariate")
        coefficient = float(model.theta[model.schema.index(FEE_COVARIATE)])
        if coefficient > 0:
            logger.warning(
                f"Fee coefficient {coefficient:.4f} is positive; the bound may not decrease in the fee"
            )
        rows = []
        for fee in fees:
            mean_tau, var_tau = latency_service.predict_moments(model, {**covariates, "fee_per_byte": float(fee)})
            m1, m2 = latency_service.total_latency_moments(mean_tau, var_tau, blocks, confirmations)
            d = self.crra_bound(BoundInputs(sigma, gamma, m1, m2)).d
            rows.append({"fee_per_byte": float(fee), "mean_tau": mean_tau, "var_tau": var_tau,
                         "m1": m1, "m2": m2, "bound_bp": bound_bp(d)})
        return pd.DataFrame(rows)

    def summarize(self, frame: pd.DataFrame) -> pd.DataFrame:
        """
        Per-exchange descriptive statistics of bound_bp with the median
        security and uncertainty shares.
        """
        grouped = frame.groupby("sell_exchange")
        summary = grouped["bound_bp"].agg(
            n="count",
            mean="mean",
            median="median",
            sd="std",
            q05=lambda s: s.quantile(0.05),
            q95=lambda s: s.quantile(0.95),
        )
        summary["security_share"] = grouped["security_share"].median()
        summary["uncertainty_share"] = grouped["uncertainty_share"].median()
        return summary.reset_index()


# Default service instance
bounds_service = BoundsService()


class FeeBoundCurve:
    """
    Bound of a sell exchange as a function of the settlement fee paid in the
    asset, d(f), under one latency model. Fees are converted to fee per byte
    with the settlement transaction size.

    Unit-volatility curves are cached per (mempool size, confirmations); the
    CRRA bound is linear in sigma.
    """

    def __init__(
        self,
        model: LatencyModel,
        blocks: BlockTimeStats,
        gamma: float,
        fees: Sequence[float],
        tx_bytes: int,
        service: BoundsService = bounds_service,
    ):
        if tx_bytes <= 0:
            raise ValidationError(f"Settlement transaction size must be positive, got {tx_bytes}")
        self.model = model
        self.blocks = blocks
        self.gamma = gamma
        self.fees = np.asarray(fees, dtype=float)
        self.tx_bytes = tx_bytes
        self.service = service
        self._unit: dict[tuple[float, int], np.ndarray] = {}

    def unit_bounds(self, mempool: float, confirmations: int) -> np.ndarray:
        key = (float(mempool), int(confirmations))
        if key not in self._unit:
            covariates = {"mempool_size": mempool}
            if FEE_COVARIATE in self.model.schema:
                per_byte = to_fee_per_byte(self.fees, self.tx_bytes)
                response = self.service.bound_fee_response(
                    self.model, covariates, per_byte, 1.0, self.gamma, self.blocks, confirmations
                )
                self._unit[key] = response["bound_bp"].to_numpy() / BASIS_POINTS
            else:
                mean_tau, var_tau = latency_service.predict_moments(self.model, covariates)
                m1, m2 = latency_service.total_latency_moments(mean_tau, var_tau, self.blocks, confirmations)
                d = self.service.crra_bound(BoundInputs(1.0, self.gamma, m1, m2)).d
                self._unit[key] = np.full(len(self.fees), d)
        return self._unit[key]

    def bound_fn(self, sigma: float, mempool: float, confirmations: int) -> Callable[[float], float]:
        """d(f) for one sell exchange and minute, exact on the fee grid"""
        bounds = sigma * self.unit_bounds(mempool, confirmations)
        return lambda fee: float(np.interp(fee, self.fees, bounds))
