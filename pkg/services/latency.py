import hashlib
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger
from scipy import optimize, special, stats

from services.errors import ConvergenceError, ValidationError

SATOSHI_PER_COIN = 1e8
MIN_RECORDS = 50
GRADIENT_TOLERANCE = 1e-6
NEWTON_STEPS = 20
# Shape used when every latency is identical and the likelihood has no finite maximum.
DEGENERATE_SHAPE = 1e6

# Covariate transforms recorded in every fitted model's schema.
COVARIATES = {
    "log1p_fee_per_byte": ("fee_per_byte", np.log1p),
    "log_mempool_size": ("mempool_size", np.log),
}


@dataclass(frozen=True)
class TxRecord:
    """One confirmed transaction; times are UTC timestamps, latency in minutes"""
    tx_id: str
    announce_time: pd.Timestamp
    inclusion_time: pd.Timestamp
    fee_per_byte: float
    size: int
    mempool_size: int

    def __post_init__(self):
        object.__setattr__(self, "announce_time", pd.Timestamp(self.announce_time))
        object.__setattr__(self, "inclusion_time", pd.Timestamp(self.inclusion_time))
        if self.latency <= 0:
            raise ValidationError(f"{self.tx_id}: inclusion must come after announcement")
        if self.fee_per_byte < 0:
            raise ValidationError(f"{self.tx_id}: negative fee per byte")
        if self.mempool_size < 1:
            raise ValidationError(f"{self.tx_id}: mempool size must be at least 1")

    @property
    def latency(self) -> float:
        return (self.inclusion_time - self.announce_time).total_seconds() / 60.0


@dataclass(frozen=True)
class BlockTimeStats:
    """Mean (minutes) and variance (minutes^2) of the time between blocks"""
    mean: float
    variance: float

    def __post_init__(self):
        if self.mean <= 0 or self.variance < 0:
            raise ValidationError("Block time mean must be positive and variance non-negative")


@dataclass
class LatencyModel:
    """
    Fitted duration model with rate beta_i = exp(-x_i' theta) and shape alpha,
    so E(tau | x) = alpha * exp(x' theta).
    """
    kind: str
    alpha: float
    theta: np.ndarray
    schema: list[str]
    fit_day: Optional[str] = None
    loglik: float = np.nan
    n_obs: int = 0
    standard_errors: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.kind not in ("exponential", "gamma"):
            raise ValidationError(f"Unknown latency model kind: {self.kind!r}")
        if self.alpha <= 0:
            raise ValidationError("Gamma shape must be positive")
        if len(self.theta) != len(self.schema):
            raise ValidationError(f"Coefficient vector {self.theta} does not match schema {self.schema}")

    @property
    def n_params(self) -> int:
        return len(self.theta) + (1 if self.kind == "gamma" else 0)

    @property
    def params(self) -> dict[str, float]:
        values = dict(zip(self.schema, map(float, self.theta)))
        values["alpha"] = float(self.alpha)
        return values

    def design(self, covariates: Mapping[str, float]) -> np.ndarray:
        """Transformed covariate vector for raw values keyed by source field"""
        x = []
        for name in self.schema:
            if name == "intercept":
                x.append(1.0)
                continue
            source, transform = COVARIATES[name]
            if source not in covariates:
                raise ValidationError(f"Covariate {source!r} required by schema {self.schema}")
            x.append(float(transform(covariates[source])))
        return np.array(x)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": float(self.alpha),
            "theta": dict(zip(self.schema, map(float, self.theta))),
            "schema": list(self.schema),
            "transforms": {name: f"{COVARIATES[name][1].__name__}({COVARIATES[name][0]})"
                           for name in self.schema if name != "intercept"},
            "fit_day": self.fit_day,
            "loglik": float(self.loglik),
            "n_obs": int(self.n_obs),
            "standard_errors": {k: float(v) for k, v in self.standard_errors.items()},
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LatencyModel":
        schema = list(data["schema"])
        return cls(
            kind=data["kind"],
            alpha=float(data["alpha"]),
            theta=np.array([data["theta"][name] for name in schema]),
            schema=schema,
            fit_day=data.get("fit_day"),
            loglik=float(data.get("loglik", np.nan)),
            n_obs=int(data.get("n_obs", 0)),
            standard_errors=dict(data.get("standard_errors", {})),
            diagnostics=dict(data.get("diagnostics", {})),
        )


def records_frame(records: Sequence[TxRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "tx_id": [r.tx_id for r in records],
            "announce_time": [r.announce_time for r in records],
            "inclusion_time": [r.inclusion_time for r in records],
            "latency": [r.latency for r in records],
            "fee_per_byte": [r.fee_per_byte for r in records],
            "size": [r.size for r in records],
            "mempool_size": [r.mempool_size for r in records],
        }
    )


def _fingerprint(tau: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(tau, dtype=float).tobytes()).hexdigest()[:16]


def gamma_loglik(params: np.ndarray, tau: np.ndarray, x: np.ndarray, fixed_shape: bool = False):
    """
    Log-likelihood, score and observed information of the gamma regression.

    Args:
        params: theta followed by log(alpha) unless fixed_shape (alpha = 1)
        tau: latencies, minutes
        x: design matrix (n, k)

    Returns:
        (loglik, gradient, hessian) summed over observations
    """
    k = x.shape[1]
    theta = params[:k]
    log_alpha = 0.0 if fixed_shape else params[k]
    alpha = np.exp(log_alpha)
    eta = x @ theta
    scaled = tau * np.exp(-eta)
    log_tau = np.log(tau)

    loglik = np.sum(-alpha * eta - special.gammaln(alpha) + (alpha - 1.0) * log_tau - scaled)

    score_theta = x.T @ (scaled - alpha)
    hess_theta = -(x.T * scaled) @ x
    if fixed_shape:
        return float(loglik), score_theta, hess_theta

    shape_term = -eta - special.digamma(alpha) + log_tau
    score_shape = alpha * np.sum(shape_term)
    hess_shape = score_shape - alpha ** 2 * special.polygamma(1, alpha) * len(tau)
    cross = -alpha * x.sum(axis=0)

    gradient = np.append(score_theta, score_shape)
    hessian = np.zeros((k + 1, k + 1))
    hessian[:k, :k] = hess_theta
    hessian[:k, k] = hessian[k, :k] = cross
    hessian[k, k] = hess_shape
    return float(loglik), gradient, hessian


class LatencyService:
    """Maximum likelihood duration models for transaction confirmation latency"""

    def __init__(self, min_records: int = MIN_RECORDS, gradient_tolerance: float = GRADIENT_TOLERANCE):
        self.min_records = min_records
        self.gradient_tolerance = gradient_tolerance

    def _design(self, frame: pd.DataFrame, with_covariates: bool) -> tuple[np.ndarray, list[str]]:
        columns = [np.ones(len(frame))]
        schema = ["intercept"]
        if with_covariates:
            for name, (source, transform) in COVARIATES.items():
                values = transform(frame[source].to_numpy(dtype=float))
                if not np.isfinite(values).all():
                    raise ValidationError(f"Covariate {source} has non-finite transformed values")
                if np.ptp(values) == 0:
                    logger.warning(f"Covariate {source} has zero variance, dropping it")
                    continue
                columns.append(values)
                schema.append(name)
        return np.column_stack(columns), schema

    def _polish(self, params: np.ndarray, tau: np.ndarray, x: np.ndarray, fixed_shape: bool) -> np.ndarray:
        """Newton steps on the analytic information from the quasi-Newton optimum"""
        n = len(tau)
        loglik, gradient, hessian = gamma_loglik(params, tau, x, fixed_shape)
        for _ in range(NEWTON_STEPS):
            if np.linalg.norm(gradient / n) < self.gradient_tolerance * 1e-2:
                break
            try:
                candidate = params - np.linalg.solve(hessian, gradient)
            except np.linalg.LinAlgError:
                break
            candidate_loglik, candidate_gradient, candidate_hessian = gamma_loglik(candidate, tau, x, fixed_shape)
            if not np.isfinite(candidate_loglik) or candidate_loglik < loglik:
                break
            params, loglik, gradient, hessian = candidate, candidate_loglik, candidate_gradient, candidate_hessian
        return params

    def fit(
        self,
        records: Sequence[TxRecord] | pd.DataFrame,
        kind: str = "gamma",
        with_covariates: bool = True,
        fit_day: Optional[str] = None,
    ) -> LatencyModel:
        """
        Fit an exponential (alpha fixed to 1) or gamma duration model.

        Args:
            records: transactions or a frame with latency/fee_per_byte/mempool_size
            kind: "exponential" or "gamma"
            with_covariates: include log(1 + fee per byte) and log mempool size

        Returns:
            Fitted LatencyModel with log-likelihood and standard errors
        """
        frame = records if isinstance(records, pd.DataFrame) else records_frame(records)
        if kind not in ("exponential", "gamma"):
            raise ValidationError(f"Unknown latency model kind: {kind!r}")
        tau = frame["latency"].to_numpy(dtype=float)
        if len(tau) < self.min_records:
            raise ValidationError(f"Need at least {self.min_records} records, got {len(tau)}")
        if (tau <= 0).any():
            raise ValidationError("All latencies must be positive")

        x, schema = self._design(frame, with_covariates)
        fixed_shape = kind == "exponential"
        k = x.shape[1]

        if kind == "gamma" and np.ptp(tau) == 0:
            logger.warning("All latencies identical: gamma shape diverges, model flagged near-degenerate")
            theta = np.zeros(k)
            theta[0] = np.log(tau[0] / DEGENERATE_SHAPE)
            params = np.append(theta, np.log(DEGENERATE_SHAPE))
            loglik, _, _ = gamma_loglik(params, tau, x)
            return LatencyModel(kind, DEGENERATE_SHAPE, theta, schema, fit_day, loglik, len(tau),
                                diagnostics={"near_degenerate": True, "data": _fingerprint(tau)})

        # moment-based start: intercept from the mean latency
        start = np.zeros(k + (0 if fixed_shape else 1))
        start[0] = np.log(tau.mean())
        n = len(tau)

        def objective(params):
            loglik, gradient, _ = gamma_loglik(params, tau, x, fixed_shape)
            return -loglik / n, -gradient / n

        result = optimize.minimize(objective, start, jac=True, method="BFGS",
                                   options={"gtol": self.gradient_tolerance * 1e-2, "maxiter": 2000})
        params = self._polish(result.x, tau, x, fixed_shape)
        loglik, gradient, hessian = gamma_loglik(params, tau, x, fixed_shape)
        grad_norm = float(np.linalg.norm(gradient / n))
        if not np.isfinite(loglik) or grad_norm >= self.gradient_tolerance:
            raise ConvergenceError(
                f"{kind} duration model did not converge",
                {"message": result.message, "iterations": result.nit, "gradient_norm": grad_norm,
                 "loglik": loglik, "n_obs": n},
            )

        theta = params[:k]
        alpha = 1.0 if fixed_shape else float(np.exp(params[k]))
        standard_errors = {}
        try:
            covariance = np.linalg.inv(-hessian)
            se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
            standard_errors = dict(zip(schema, map(float, se[:k])))
            if not fixed_shape:
                standard_errors["alpha"] = float(alpha * se[k])
        except np.linalg.LinAlgError:
            logger.warning(f"{kind} model: singular information matrix, no standard errors")

        model = LatencyModel(
            kind=kind,
            alpha=alpha,
            theta=theta,
            schema=schema,
            fit_day=fit_day,
            loglik=loglik,
            n_obs=n,
            standard_errors=standard_errors,
            diagnostics={"gradient_norm": grad_norm, "iterations": int(result.nit),
                         "near_degenerate": False, "data": _fingerprint(tau)},
        )
        logger.debug(f"Fitted {kind} model ({'with' if with_covariates else 'without'} covariates): "
                     f"loglik={loglik:.3f}, params={model.params}")
        return model

    def lr_test(self, restricted: LatencyModel, unrestricted: LatencyModel) -> tuple[float, int, float]:
        """Likelihood ratio test of a nested restriction: (statistic, dof, p-value)"""
        nested_schema = set(restricted.schema) <= set(unrestricted.schema)
        nested_kind = restricted.kind == unrestricted.kind or (
            restricted.kind == "exponential" and unrestricted.kind == "gamma"
        )
        if not (nested_schema and nested_kind):
            raise ValidationError(
                f"{restricted.kind}{restricted.schema} is not nested in {unrestricted.kind}{unrestricted.schema}"
            )
        same_data = restricted.diagnostics.get("data") == unrestricted.diagnostics.get("data")
        if restricted.n_obs != unrestricted.n_obs or not same_data:
            raise ValidationError("Likelihood ratio test needs models fitted on the same data")

        dof = unrestricted.n_params - restricted.n_params
        statistic = max(0.0, 2.0 * (unrestricted.loglik - restricted.loglik))
        if dof == 0:
            return statistic, 0, 1.0
        return statistic, dof, float(stats.chi2.sf(statistic, dof))

    def predict_moments(self, model: LatencyModel, covariates: Mapping[str, float] | None = None) -> tuple[float, float]:
        """Conditional mean (minutes) and variance (minutes^2) of latency"""
        eta = float(model.design(covariates or {}) @ model.theta)
        mean = model.alpha * np.exp(eta)
        return float(mean), float(model.alpha * np.exp(2.0 * eta))

    def predict_mean(self, model: LatencyModel, frame: pd.DataFrame) -> np.ndarray:
        x = np.column_stack([
            np.ones(len(frame)) if name == "intercept"
            else COVARIATES[name][1](frame[COVARIATES[name][0]].to_numpy(dtype=float))
            for name in model.schema
        ])
        return model.alpha * np.exp(x @ model.theta)

    def mspe(self, model: LatencyModel, records: Sequence[TxRecord] | pd.DataFrame) -> float:
        """Mean squared prediction error of the conditional mean, minutes^2"""
        frame = records if isinstance(records, pd.DataFrame) else records_frame(records)
        if len(frame) == 0:
            raise ValidationError("MSPE needs at least one record")
        error = frame["latency"].to_numpy(dtype=float) - self.predict_mean(model, frame)
        return float(np.mean(error ** 2))

    def total_latency_moments(
        self, mean_tau: float, var_tau: float, blocks: BlockTimeStats, confirmations: int
    ) -> tuple[float, float]:
        """
        First and second raw moments (m1, m2) of the latency until the deposit
        has the required number of confirmations.
        """
        if confirmations < 1:
            raise ValidationError(f"Confirmations must be at least 1, got {confirmations}")
        if mean_tau <= 0 or var_tau < 0:
            raise ValidationError("Latency mean must be positive and variance non-negative")
        extra = confirmations - 1
        m1 = mean_tau + blocks.mean * extra
        m2 = var_tau + blocks.variance * extra ** 2 + (blocks.mean * extra + mean_tau) ** 2
        return float(m1), float(m2)

    def central_moments(self, model: LatencyModel, covariates: Mapping[str, float] | None = None) -> dict:
        """
        Gamma central moments for drift-aware bounds. With rate beta and shape
        alpha: variance alpha/beta^2, third 2 alpha/beta^3, fourth
        3 alpha (alpha + 2)/beta^4.
        """
        eta = float(model.design(covariates or {}) @ model.theta)
        scale = np.exp(eta)  # 1 / beta
        a = model.alpha
        return {
            "mean": a * scale,
            "variance": a * scale ** 2,
            "third": 2.0 * a * scale ** 3,
            "fourth": 3.0 * a * (a + 2.0) * scale ** 4,
        }

    def walk_forward(
        self, frame: pd.DataFrame, days: Sequence[date], with_lookahead: bool = False
    ) -> tuple[dict[date, dict[str, LatencyModel]], pd.DataFrame]:
        """
        Daily refit protocol: models applied on day T are fitted on the
        transactions confirmed on day T-1.

        Returns:
            models keyed by application day and model name, and a
            per-day summary with parameters, LR tests and MSPEs
        """
        confirmed_day = frame["inclusion_time"].dt.tz_convert("UTC").dt.date
        specs = {
            "exponential": ("exponential", False),
            "exponential_cov": ("exponential", True),
            "gamma": ("gamma", False),
            "gamma_cov": ("gamma", True),
        }
        models: dict[date, dict[str, LatencyModel]] = {}
        rows = []
        for day in days:
            fit_on = day if with_lookahead else day - pd.Timedelta(days=1).to_pytimedelta()
            train = frame[confirmed_day == fit_on]
            test = frame[confirmed_day == day]
            if len(train) < self.min_records:
                logger.warning(f"{day}: {len(train)} transactions on {fit_on}, skipping latency fit")
                continue
            fitted = {name: self.fit(train, kind, cov, fit_day=str(fit_on)) for name, (kind, cov) in specs.items()}
            models[day] = fitted

            row = {"day": str(day), "fit_day": str(fit_on), "n_fit": len(train), "n_test": len(test)}
            for name, model in fitted.items():
                for param, value in model.params.items():
                    if model.kind == "exponential" and param == "alpha":
                        continue
                    row[f"{name}.{param}"] = value
                row[f"{name}.mspe_in"] = self.mspe(model, train)
                row[f"{name}.mspe_out"] = self.mspe(model, test) if len(test) else np.nan
            for label, (restricted, unrestricted) in {
                "lr_covariates_exponential": ("exponential", "exponential_cov"),
                "lr_covariates_gamma": ("gamma", "gamma_cov"),
                "lr_gamma_vs_exponential": ("exponential", "gamma"),
            }.items():
                statistic, dof, p_value = self.lr_test(fitted[restricted], fitted[unrestricted])
                row[f"{label}.statistic"] = statistic
                row[f"{label}.dof"] = dof
                row[f"{label}.p_value"] = p_value
            rows.append(row)
        return models, pd.DataFrame(rows)


def to_fee_per_byte(fee, tx_bytes: int):
    """Settlement fee paid in the asset as satoshi per byte of a `tx_bytes` transaction"""
    return fee * SATOSHI_PER_COIN / tx_bytes


def to_asset_fee(fee_per_byte, tx_bytes: int):
    return fee_per_byte * tx_bytes / SATOSHI_PER_COIN


def block_time_stats(timestamps: Sequence) -> BlockTimeStats:
    """Sample mean and variance of inter-block times (minutes) from block timestamps in height order"""
    times = pd.DatetimeIndex(pd.to_datetime(list(timestamps), utc=True))
    if len(times) < 3:
        raise ValidationError("Need at least 3 blocks for inter-block time statistics")
    gaps = np.diff(times.asi8) / 6e10
    return BlockTimeStats(float(np.mean(gaps)), float(np.var(gaps, ddof=1)))


def mempool_at(frame: pd.DataFrame, minutes: pd.DatetimeIndex) -> pd.Series:
    """Mempool size recorded by the latest announced transaction at or before each minute"""
    ordered = frame.sort_values("announce_time")[["announce_time", "mempool_size"]]
    ordered = ordered.assign(announce_time=pd.to_datetime(ordered["announce_time"], utc=True))
    grid = pd.DataFrame({"minute": minutes})
    joined = pd.merge_asof(grid, ordered, left_on="minute", right_on="announce_time", direction="backward")
    return pd.Series(joined["mempool_size"].to_numpy(dtype=float), index=minutes)


# Default service instance
latency_service = LatencyService()
