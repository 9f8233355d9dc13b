import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy import stats

from services.bounds import TAYLOR_ORDER, BoundInputs, UtilitySpec, bounds_service
from services.errors import SimulationError, ValidationError
from utils.parallel import run_parallel

SHARD_SIZE = 100_000
CRRA_FLOOR = -0.99
MAX_REJECTED_SHARE = 0.001
KS_LEVEL = 0.01


@dataclass(frozen=True)
class LatencyLaw:
    """
    Settlement latency distribution in minutes.

    Gamma latencies use shape `shape` and rate `rate` (mean shape / rate);
    numpy draws with scale 1 / rate. Exponential uses `rate` only.
    """
    kind: str
    rate: Optional[float] = None
    shape: Optional[float] = None
    sample: Optional[tuple] = None

    def __post_init__(self):
        if self.kind == "exponential":
            if not (self.rate or 0) > 0:
                raise ValidationError("Exponential latency needs a positive rate")
        elif self.kind == "gamma":
            if not (self.rate or 0) > 0 or not (self.shape or 0) > 0:
                raise ValidationError("Gamma latency needs positive shape and rate")
        elif self.kind == "empirical":
            if not self.sample or min(self.sample) <= 0:
                raise ValidationError("Empirical latency needs a non-empty positive sample")
        else:
            raise ValidationError(f"Unknown latency law: {self.kind}")

    def raw_moments(self) -> tuple[float, float]:
        if self.kind == "exponential":
            return 1.0 / self.rate, 2.0 / self.rate ** 2
        if self.kind == "gamma":
            mean = self.shape / self.rate
            return mean, mean ** 2 + self.shape / self.rate ** 2
        values = np.asarray(self.sample, dtype=float)
        return float(values.mean()), float(np.mean(values ** 2))

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "exponential":
            return rng.exponential(1.0 / self.rate, size)
        if self.kind == "gamma":
            return rng.gamma(self.shape, 1.0 / self.rate, size)
        return rng.choice(np.asarray(self.sample, dtype=float), size)


@dataclass(frozen=True)
class SimConfig:
    seed: int
    paths: int
    sigma: float
    latency: LatencyLaw
    delta: float = 0.0
    mu: float = 0.0
    utility: UtilitySpec = field(default_factory=UtilitySpec)
    step: float = 1.0

    def __post_init__(self):
        if self.paths < 1:
            raise ValidationError(f"Need at least one path, got {self.paths}")
        if not self.step > 0:
            raise ValidationError(f"Time step must be positive, got {self.step}")
        if self.sigma < 0:
            raise ValidationError(f"Volatility must be non-negative, got {self.sigma}")

    def with_delta(self, delta: float) -> "SimConfig":
        return SimConfig(self.seed, self.paths, self.sigma, self.latency, delta, self.mu, self.utility, self.step)

    def echo(self) -> dict:
        data = asdict(self)
        data["latency"].pop("sample")
        return data


@dataclass
class CertaintyEquivalent:
    taylor: float
    taylor_se: float
    full: float
    full_se: float
    mean: float
    rejected: int
    paths: int
    truncation_gap: float = 0.0

    @property
    def estimate(self) -> float:
        """Order-4 certainty equivalent, the convention the analytic bounds use"""
        return self.taylor

    @property
    def standard_error(self) -> float:
        return self.taylor_se


def _sample_shard(job: tuple) -> np.ndarray:
    seed_seq, size, sigma, mu, delta, latency = job
    rng = np.random.Generator(np.random.Philox(seed_seq))
    tau = latency.draw(rng, size)
    z = rng.standard_normal(size)
    return delta + mu * tau + sigma * np.sqrt(tau) * z


def mixture_moments(config: SimConfig) -> dict:
    """Analytic mean and variance of delta + mu tau + sigma sqrt(tau) Z"""
    m1, m2 = config.latency.raw_moments()
    v = m2 - m1 ** 2
    variance = config.sigma ** 2 * m1 + config.mu ** 2 * v
    if config.mu != 0.0 and config.latency.kind == "exponential":
        closed_form = (config.mu ** 2 + config.sigma ** 2) * m1
        logger.info(
            f"Asymmetric Laplace variance: mixture {variance:.6g} vs (mu^2 + sigma^2)/lambda {closed_form:.6g}"
        )
    return {"mean": config.delta + config.mu * m1, "variance": variance, "m1": m1, "m2": m2}


class SimulatorService:
    """Monte Carlo returns over random settlement latency"""

    def __init__(self, shard_size: int = SHARD_SIZE, jobs: int = 1, ks_level: float = KS_LEVEL):
        self.shard_size = shard_size
        self.jobs = jobs
        self.ks_level = ks_level

    def sample_returns(self, config: SimConfig) -> np.ndarray:
        """
        Exact terminal returns r = delta + mu tau + sigma sqrt(tau) Z.

        Paths are drawn in fixed shards with independent Philox streams, so a
        seed gives the same sample for any number of jobs.
        """
        n_shards = math.ceil(config.paths / self.shard_size)
        children = np.random.SeedSequence(config.seed).spawn(n_shards)
        jobs = [
            (child, min(self.shard_size, config.paths - i * self.shard_size),
             config.sigma, config.mu, config.delta, config.latency)
            for i, child in enumerate(children)
        ]
        return np.concatenate(run_parallel(_sample_shard, jobs, self.jobs))

    def sample_paths(self, config: SimConfig, n_paths: int = 5) -> pd.DataFrame:
        """Discretized Brownian traces stopped at their latency, for plotting"""
        rng = np.random.Generator(np.random.Philox(config.seed))
        tau = config.latency.draw(rng, n_paths)
        rows = []
        for path, horizon in enumerate(tau):
            times = np.append(np.arange(0.0, horizon, config.step), horizon)
            dt = np.diff(times, prepend=0.0)
            level = config.delta + np.cumsum(config.mu * dt + config.sigma * np.sqrt(dt) * rng.standard_normal(len(dt)))
            rows.append(pd.DataFrame({"path": path, "minute": times, "log_return": level}))
        return pd.concat(rows, ignore_index=True)

    def laplace_check(self, sample: np.ndarray, delta: float, sigma: float, rate: float) -> dict:
        """Kolmogorov-Smirnov test of the sample against Laplace(delta, sigma / sqrt(2 rate))"""
        scale = sigma / math.sqrt(2.0 * rate)
        result = stats.kstest(sample, "laplace", args=(delta, scale))
        critical = float(stats.kstwo.ppf(1.0 - self.ks_level, len(sample)))
        return {
            "statistic": float(result.statistic),
            "p_value": float(result.pvalue),
            "critical_value": critical,
            "level": self.ks_level,
            "passed": bool(result.statistic < critical),
        }

    def _taylor(self, utility: UtilitySpec, returns: np.ndarray, mean: float) -> tuple[float, float, dict]:
        centered = returns - mean
        powers = {k: centered ** k for k in range(2, TAYLOR_ORDER + 1)}
        moments = {k: math.fsum(p) / len(returns) for k, p in powers.items()}
        moments[1] = 0.0
        coef = {k: utility.ratio(k, mean) / math.factorial(k) for k in powers}
        slope = {k: utility.ratio_derivative(k, mean) / math.factorial(k) for k in powers}
        if not all(math.isfinite(c) for c in coef.values()):
            raise SimulationError("Order-4 certainty equivalent is undefined at a non-positive mean return")
        ce = mean + sum(coef[k] * moments[k] for k in powers)

        # influence function of mean + sum a_k(mean) m_k
        psi = centered * (1.0 + sum(slope[k] * moments[k] for k in powers))
        for k in powers:
            psi += coef[k] * (powers[k] - moments[k] - k * moments[k - 1] * centered)
        return ce, float(np.std(psi, ddof=1) / math.sqrt(len(returns))), moments

    def ce_estimate(self, config: SimConfig, returns: Optional[np.ndarray] = None) -> CertaintyEquivalent:
        """
        Certainty equivalents of the simulated trade.

        The order-4 Taylor CE (standard error from its influence function) is
        the estimate bounds are checked against; the full-utility CE
        U^-1(mean U) with a delta-method error is reported next to it.
        truncation_gap compares the full CE with the order-4 expansion of the
        same utility, so it measures truncation only.
        """
        utility = config.utility
        returns = self.sample_returns(config) if returns is None else np.asarray(returns, dtype=float)
        n = len(returns)
        mean = math.fsum(returns) / n
        if utility.kind == "linear":
            se = float(np.std(returns, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            return CertaintyEquivalent(mean, se, mean, se, mean, 0, n)

        rejected = 0
        kept = returns
        if utility.kind == "crra":
            breach = returns <= CRRA_FLOOR
            rejected = int(breach.sum())
            if rejected > MAX_REJECTED_SHARE * n:
                raise SimulationError(
                    f"{rejected} of {n} returns are at or below {CRRA_FLOOR}; use a smaller sigma or shift delta"
                )
            if rejected:
                logger.warning(f"Rejected {rejected} returns below the CRRA domain floor")
                kept = returns[~breach]

        values = utility.value(kept)
        mean_utility = math.fsum(values) / len(kept)
        full = utility.inverse(mean_utility)
        full_se = float(np.std(values, ddof=1) / math.sqrt(len(kept)) / utility.marginal(full)) if len(kept) > 1 else 0.0

        if np.ptp(returns) == 0:
            return CertaintyEquivalent(mean, 0.0, full, full_se, mean, rejected, n, abs(full - mean))
        taylor, taylor_se, moments = self._taylor(utility, returns, mean)

        # order-4 expansion of mean U for the same utility: CRRA ratios at wealth 1 + mean
        anchor = 1.0 + mean if utility.kind == "crra" else mean
        correction = sum(utility.ratio(k, anchor) / math.factorial(k) * moments[k] for k in range(2, TAYLOR_ORDER + 1))
        expanded = utility.inverse(float(utility.value(mean)) + utility.marginal(mean) * correction)
        return CertaintyEquivalent(taylor, taylor_se, full, full_se, mean, rejected, n, abs(full - expanded))

    def moment_check(self, config: SimConfig, returns: np.ndarray) -> dict:
        """Sample mean and variance against the mixture identities, within 3 standard errors"""
        expected = mixture_moments(config)
        n = len(returns)
        mean = math.fsum(returns) / n
        centered = returns - mean
        variance = math.fsum(centered ** 2) / (n - 1)
        mean_se = math.sqrt(variance / n)
        variance_se = math.sqrt(max(math.fsum(centered ** 4) / n - variance ** 2, 0.0) / n)
        return {
            "mean": mean,
            "expected_mean": expected["mean"],
            "mean_se": mean_se,
            "variance": variance,
            "expected_variance": expected["variance"],
            "variance_se": variance_se,
            "passed": bool(
                abs(mean - expected["mean"]) <= 3 * mean_se
                and abs(variance - expected["variance"]) <= 3 * variance_se
            ),
        }

    def indifference_check(self, config: SimConfig, bound: float) -> dict:
        """
        CE at the bound is zero within 3 standard errors; CE at twice the bound
        is positive at 99%. The full-utility CE and truncation gap are reported
        as diagnostics and do not widen the tolerance.
        """
        at_bound = self.ce_estimate(config.with_delta(bound))
        doubled = self.ce_estimate(config.with_delta(2.0 * bound))
        tolerance = 3.0 * at_bound.standard_error
        z99 = float(stats.norm.ppf(0.99))
        return {
            "bound": bound,
            "ce": at_bound.estimate,
            "ce_se": at_bound.standard_error,
            "ce_full": at_bound.full,
            "ce_full_se": at_bound.full_se,
            "truncation_gap": at_bound.truncation_gap,
            "tolerance": tolerance,
            "ce_doubled": doubled.estimate,
            "ce_doubled_se": doubled.standard_error,
            "passed": bool(
                abs(at_bound.estimate) < tolerance
                and doubled.estimate - z99 * doubled.standard_error > 0
            ),
        }

    def ce_curve(self, config: SimConfig, deltas: Sequence[float]) -> pd.DataFrame:
        """Certainty equivalents over a grid of differences, sharing the same seed"""
        rows = []
        for delta in deltas:
            ce = self.ce_estimate(config.with_delta(float(delta)))
            rows.append({"delta": float(delta), "ce": ce.estimate, "ce_se": ce.standard_error, "ce_full": ce.full})
        return pd.DataFrame(rows)


# Default service instance
simulator_service = SimulatorService()


@dataclass(frozen=True)
class SuiteSettings:
    """Acceptance suite of the Monte Carlo oracle, see data/synthetic.toml"""
    paths: int = 1_000_000
    sigma: float = 0.001
    rate: float = 0.1
    delta: float = 0.0
    control_shape: float = 0.6
    gamma: float = 2.0
    indifference_configs: int = 20
    sigma_range: tuple = (0.0005, 0.002)
    shape_range: tuple = (0.5, 2.0)
    mean_latency_range: tuple = (10.0, 60.0)
    trace_paths: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "SuiteSettings":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"Unknown simulation settings: {unknown}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def run_suite(service: SimulatorService, settings: SuiteSettings, seed: int) -> dict:
    """
    Laplace fit under exponential latency, the gamma negative control, the
    mixture moment identities and CE indifference at random CRRA bounds.
    """
    exponential = LatencyLaw("exponential", rate=settings.rate)
    base = SimConfig(seed, settings.paths, settings.sigma, exponential, settings.delta,
                     utility=UtilitySpec("crra", settings.gamma))
    sample = service.sample_returns(base)
    laplace = service.laplace_check(sample, settings.delta, settings.sigma, settings.rate)
    moments = service.moment_check(base, sample)

    control_law = LatencyLaw("gamma", rate=settings.control_shape * settings.rate, shape=settings.control_shape)
    control_sample = service.sample_returns(SimConfig(seed + 1, settings.paths, settings.sigma, control_law, settings.delta))
    control = service.laplace_check(control_sample, settings.delta, settings.sigma, settings.rate)

    rng = np.random.default_rng(seed)
    indifference = []
    for i in range(settings.indifference_configs):
        sigma = float(rng.uniform(*settings.sigma_range))
        shape = float(rng.uniform(*settings.shape_range))
        mean = float(rng.uniform(*settings.mean_latency_range))
        law = LatencyLaw("gamma", rate=shape / mean, shape=shape)
        m1, m2 = law.raw_moments()
        bound = bounds_service.crra_bound(BoundInputs(sigma, settings.gamma, m1, m2)).d
        config = SimConfig(seed + 2 + i, settings.paths, sigma, law, utility=UtilitySpec("crra", settings.gamma))
        check = service.indifference_check(config, bound)
        indifference.append({"sigma": sigma, "shape": shape, "rate": law.rate, "m1": m1, "m2": m2, **check})

    report = {
        "seed": seed,
        "settings": asdict(settings),
        "laplace": laplace,
        "negative_control": {**control, "rejected": not control["passed"]},
        "moments": moments,
        "mixture": mixture_moments(base),
        "indifference": indifference,
    }
    report["passed"] = bool(
        laplace["passed"]
        and not control["passed"]
        and moments["passed"]
        and all(c["passed"] for c in indifference)
    )
    return report
