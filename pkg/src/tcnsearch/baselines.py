"""Reference predictors the learned network models must beat.

Three methods, all fit per client and per concept on present values only:
the training mean, an ordinary-least-squares trend on the day index, and a
local-level dynamic linear model (random-walk level plus observation noise)
filtered with the standard Kalman recursion. Multi-step forecasts from the
local-level model are constant at the last filtered level, which is that
model's exact multi-step expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ema import ClientSeries
from .errors import ValidationError
from .model import score
from .reporting import ReportRow, ValidationReport

MEAN = "mean"
OLS_TREND = "ols_trend"
DLM_LOCAL_LEVEL = "dlm_local_level"
METHODS = (MEAN, OLS_TREND, DLM_LOCAL_LEVEL)

FALLBACK_LEVEL = 0.5
VARIANCE_GRID = np.logspace(-5, -1, 8)
INITIAL_LEVEL_VARIANCE = 1.0


@dataclass(frozen=True)
class BaselinePrediction:
    method: str
    values: np.ndarray  # (horizon_days, k)


@dataclass(frozen=True)
class FilterResult:
    levels: np.ndarray      # filtered level after each observation
    variances: np.ndarray   # posterior level variance after each observation
    loglik: float           # one-step predictive log-likelihood (obs 2..n)


def _present_points(series: ClientSeries, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    days: list[list[int]] = [[] for _ in range(k)]
    vals: list[list[float]] = [[] for _ in range(k)]
    for obs in series.observations:
        for j, v in enumerate(obs.values):
            if v is not None:
                days[j].append(obs.day)
                vals[j].append(v)
    return [(np.array(days[j], dtype=float), np.array(vals[j])) for j in range(k)]


def mean_predictor(train: ClientSeries, horizon_days: int, k: int) -> BaselinePrediction:
    """Constant forecast at the training mean (0.5 where never observed)."""
    if horizon_days < 1:
        raise ValidationError("horizon_days must be >= 1")
    means = train.concept_means(k)
    level = np.where(np.isnan(means), FALLBACK_LEVEL, means)
    return BaselinePrediction(MEAN, np.tile(level, (horizon_days, 1)))


def regression_predictor(
    train: ClientSeries,
    horizon_days: int,
    k: int,
    start_day: int | None = None,
) -> BaselinePrediction:
    """Per-concept OLS of value on day index, extrapolated and clamped to
    [0, 1]. Concepts with fewer than two present values fall back to the
    training mean. Forecast days start at ``start_day`` (default: the day
    after the last observation)."""
    if horizon_days < 1:
        raise ValidationError("horizon_days must be >= 1")
    if start_day is None:
        start_day = train.last_day + 1
    target_days = np.arange(start_day, start_day + horizon_days, dtype=float)
    fallback = mean_predictor(train, horizon_days, k).values
    out = np.empty((horizon_days, k))
    for j, (days, vals) in enumerate(_present_points(train, k)):
        if days.size < 2:
            out[:, j] = fallback[:, j]
            continue
        slope, intercept = np.polyfit(days, vals, 1)
        out[:, j] = np.clip(slope * target_days + intercept, 0.0, 1.0)
    return BaselinePrediction(OLS_TREND, out)


def local_level_filter(
    days: np.ndarray,
    values: np.ndarray,
    q: float,
    r: float,
    initial_variance: float = INITIAL_LEVEL_VARIANCE,
) -> FilterResult:
    """Kalman filter for a random-walk level observed with noise.

    ``q`` is the level innovation variance per day, ``r`` the observation
    variance. Gaps between observation days are bridged with prediction-only
    updates (the level variance grows by ``q`` per elapsed day). The first
    observation initializes the level; the predictive log-likelihood covers
    the remaining ones.
    """
    days = np.asarray(days, dtype=float)
    values = np.asarray(values, dtype=float)
    if days.size == 0:
        raise ValidationError("filter needs at least one observation")
    if q <= 0 or r <= 0:
        raise ValidationError("variances must be positive")
    m = float(values[0])
    p = float(initial_variance)
    levels = [m]
    variances = [p]
    loglik = 0.0
    for i in range(1, days.size):
        gap = days[i] - days[i - 1]
        p_pred = p + gap * q
        s = p_pred + r
        resid = values[i] - m
        loglik += -0.5 * (math.log(2.0 * math.pi * s) + resid * resid / s)
        gain = p_pred / s
        m = m + gain * resid
        p = (1.0 - gain) * p_pred
        levels.append(m)
        variances.append(p)
    return FilterResult(np.array(levels), np.array(variances), loglik)


def select_dlm_variances(days: np.ndarray, values: np.ndarray) -> tuple[float, float]:
    """Pick (q, r) from the fixed log-spaced grid by maximizing the one-step
    predictive likelihood; ties resolve to the first grid point."""
    best = (-np.inf, VARIANCE_GRID[0], VARIANCE_GRID[0])
    for q in VARIANCE_GRID:
        for r in VARIANCE_GRID:
            ll = local_level_filter(days, values, q, r).loglik
            if ll > best[0]:
                best = (ll, q, r)
    return float(best[1]), float(best[2])


def dlm_predictor(train: ClientSeries, horizon_days: int, k: int) -> BaselinePrediction:
    """Constant forecast at the final filtered level of the local-level
    model; concepts with fewer than three present values fall back to the
    training mean."""
    if horizon_days < 1:
        raise ValidationError("horizon_days must be >= 1")
    fallback = mean_predictor(train, horizon_days, k).values
    out = np.empty((horizon_days, k))
    for j, (days, vals) in enumerate(_present_points(train, k)):
        if days.size < 3:
            out[:, j] = fallback[:, j]
            continue
        q, r = select_dlm_variances(days, vals)
        level = local_level_filter(days, vals, q, r).levels[-1]
        out[:, j] = np.clip(level, 0.0, 1.0)
    return BaselinePrediction(DLM_LOCAL_LEVEL, out)


def baseline_errors(
    fit_segment: ClientSeries,
    target_segment: ClientSeries,
    k: int,
    horizon_days: int = 14,
) -> dict[str, np.ndarray]:
    """Score all baselines on one client: fit on ``fit_segment``, predict the
    days of ``target_segment`` (capped at ``horizon_days`` past the fit), and
    return per-concept MSE vectors keyed by method id."""
    if not fit_segment.observations or not target_segment.observations:
        raise ValidationError("fit and target segments must be non-empty")
    start = fit_segment.last_day + 1
    horizon = min(target_segment.last_day - start + 1, horizon_days)
    if horizon < 1:
        raise ValidationError("target segment lies before the forecast start")
    predictions = (
        mean_predictor(fit_segment, horizon, k),
        regression_predictor(fit_segment, horizon, k, start_day=start),
        dlm_predictor(fit_segment, horizon, k),
    )
    return {p.method: score(p.values, target_segment, start) for p in predictions}


def baseline_report(
    splits,
    concepts,
    horizon_days: int = 14,
) -> ValidationReport:
    """Aggregate baseline validation errors over clients.

    ``splits`` is a sequence of (train, test, validation) triples; baselines
    are fit on train+test and scored on the validation window, matching the
    protocol used for learned models.
    """
    k = len(concepts)
    errors: dict[str, list[list[float]]] = {m: [[] for _ in range(k)] for m in METHODS}
    for train, test, validation in splits:
        merged = ClientSeries(
            client_id=train.client_id,
            observations=tuple(train.observations) + tuple(test.observations),
        )
        per_method = baseline_errors(merged, validation, k, horizon_days)
        for method, errs in per_method.items():
            for j in range(k):
                if not np.isnan(errs[j]):
                    errors[method][j].append(float(errs[j]))
    rows = []
    for j, concept in enumerate(concepts):
        for method in METHODS:
            vals = errors[method][j]
            rows.append(
                ReportRow(
                    concept=concept,
                    method=method,
                    mse_mean=float(np.mean(vals)) if vals else float("nan"),
                    mse_sd=float(np.std(vals)) if vals else float("nan"),
                    n_clients=len(vals),
                )
            )
    return ValidationReport(concepts=tuple(concepts), rows=tuple(rows))
