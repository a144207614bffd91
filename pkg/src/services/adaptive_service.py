"""
Adaptive detector.

An additive forecaster (piecewise-linear trend, weekly Fourier seasonality,
holiday offset) predicts the nominal activity of each pair; its residuals
feed an adaptive Shewhart chart whose mean and variance are exponentially
decayed moments with half-life ``tau_min`` minutes. Only three running sums
are stored, and a flagged minute never enters them.

Per-service scores are turned into likelihoods through the compound
empirical + Gamma survival of the training z stream, then fused exactly like
signature scores.
"""

import math
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from dateutil.parser import isoparse
from scipy import linalg

from models.activity import MINUTES_PER_DAY, MINUTES_PER_WEEK, ActivityCube, Pair, minute_of_week
from models.detection import FusedScores
from models.errors import DegenerateModelError, InsufficientDataError
from models.run_config import AdaptiveParams
from services.signature_service import DeviationModel, fit_deviation_model, fuse_log_scores
from utils.logger import log_execution_time, setup_logger
from utils.workers import map_ordered

logger = setup_logger(__name__)

MODEL_KIND = 'adaptive'

MINUTES_PER_MONTH = 30 * MINUTES_PER_DAY


def holiday_days(holidays: Iterable[str]) -> np.ndarray:
    """Epoch day indices of ISO dates (YYYY-MM-DD)."""
    epoch = date(1970, 1, 1)
    days = sorted({(isoparse(d).date() - epoch).days for d in holidays})
    return np.array(days, dtype=np.int64)


def holiday_mask(minutes: np.ndarray, days: np.ndarray) -> np.ndarray:
    return np.isin(np.asarray(minutes) // MINUTES_PER_DAY, days)


def decay_per_minute(tau_min: float) -> float:
    """Per-minute weight factor d = 2^(-1/tau)."""
    return 2.0 ** (-1.0 / tau_min)


@dataclass(frozen=True)
class ForecastModel:
    """
    ṽ(t) = trend(t) + seasonality(minute of week) + holiday · is_holiday.

    The trend is ``intercept + slope·u + Σ deltas_j·max(0, u - knot_j)`` with
    u in days since ``t0``; it is held at its boundary value outside
    [t0, t1].
    """

    cell_id: str
    service: str
    t0: int
    t1: int
    intercept: float
    slope: float
    knots: np.ndarray = field(repr=False)
    deltas: np.ndarray = field(repr=False)
    fourier: np.ndarray = field(repr=False)
    holiday: float = 0.0

    @property
    def order(self) -> int:
        return self.fourier.shape[0] // 2

    def trend(self, minutes) -> np.ndarray:
        t = np.clip(np.asarray(minutes, dtype=np.int64), self.t0, self.t1)
        u = (t - self.t0) / MINUTES_PER_DAY
        hinge = np.maximum(0.0, u[..., None] - self.knots)
        return self.intercept + self.slope * u + hinge @ self.deltas

    def seasonality(self, minutes) -> np.ndarray:
        return fourier_basis(minutes, self.order) @ self.fourier

    def predict(self, minutes, is_holiday=False) -> np.ndarray:
        minutes = np.asarray(minutes, dtype=np.int64)
        return (self.trend(minutes) + self.seasonality(minutes)
                + self.holiday * np.asarray(is_holiday, dtype=float))


def fourier_basis(minutes, order: int) -> np.ndarray:
    """[sin(2πkm/10080) for k] + [cos(2πkm/10080) for k], m = minute of week."""
    m = minute_of_week(np.asarray(minutes, dtype=np.int64))
    angles = 2.0 * np.pi * np.asarray(m, dtype=float)[..., None] * np.arange(1, order + 1) / MINUTES_PER_WEEK
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def forecast(model: ForecastModel, t: int, is_holiday: bool = False) -> float:
    return float(model.predict(np.array([t]), np.array([is_holiday]))[0])


def fit_forecaster(
    series: np.ndarray,
    start: int,
    cell_id: str,
    service: str,
    holidays: np.ndarray = np.array([], dtype=np.int64),
    fourier_order: int = 10,
    knots_per_month: float = 4.0,
    ridge: float = 1e-3,
    min_weeks: float = 2.0,
) -> ForecastModel:
    """
    Ridge least squares over the observed training minutes.

    The intercept, base slope and holiday offset are unpenalised; knot
    deltas and Fourier coefficients carry a ridge penalty of ``ridge`` per
    observation. The holiday column is dropped when no training minute falls
    on a holiday.

    Raises:
        InsufficientDataError: fewer observed minutes than ``min_weeks`` weeks
    """
    observed = ~np.isnan(series)
    n = int(observed.sum())
    if n < min_weeks * MINUTES_PER_WEEK:
        raise InsufficientDataError(
            f"{cell_id}/{service}: {n / MINUTES_PER_WEEK:.2f} training weeks, need {min_weeks}",
            {'cell_id': cell_id, 'service': service, 'observed_minutes': n},
        )

    minutes = start + np.flatnonzero(observed).astype(np.int64)
    y = series[observed]
    t0, t1 = int(minutes[0]), int(minutes[-1])
    span_days = (t1 - t0) / MINUTES_PER_DAY
    n_knots = int(math.floor((t1 - t0) / MINUTES_PER_MONTH * knots_per_month))
    knots = np.linspace(0.0, span_days, n_knots + 2)[1:-1]

    u = (minutes - t0) / MINUTES_PER_DAY
    on_holiday = holiday_mask(minutes, holidays)
    use_holiday = bool(on_holiday.any())

    columns = [np.ones_like(u), u]
    penalised = [False, False]
    if knots.size:
        columns.extend(np.maximum(0.0, u - k) for k in knots)
        penalised.extend([True] * knots.size)
    basis = fourier_basis(minutes, fourier_order)
    columns.extend(basis.T)
    penalised.extend([True] * basis.shape[1])
    if use_holiday:
        columns.append(on_holiday.astype(float))
        penalised.append(False)

    X = np.column_stack(columns)
    gram = X.T @ X / n + np.diag(np.where(penalised, ridge, 0.0))
    coef = linalg.solve(gram, X.T @ y / n, assume_a='pos')

    n_k = knots.size
    return ForecastModel(
        cell_id=cell_id,
        service=service,
        t0=t0,
        t1=t1,
        intercept=float(coef[0]),
        slope=float(coef[1]),
        knots=knots,
        deltas=coef[2:2 + n_k].copy(),
        fourier=coef[2 + n_k:2 + n_k + 2 * fourier_order].copy(),
        holiday=float(coef[-1]) if use_holiday else 0.0,
    )


@dataclass(frozen=True)
class AdaptiveChartState:
    """
    Decayed sums S0 = Σ w, S1 = Σ w·ε, S2 = Σ w·ε² over the accepted
    residuals, weights relative to ``last_minute``.
    """

    s0: float
    s1: float
    s2: float
    decay: float
    h: float
    sigma_floor: float
    last_minute: Optional[int] = None

    @property
    def mean(self) -> float:
        return self.s1 / self.s0 if self.s0 > 0 else 0.0

    @property
    def sigma(self) -> float:
        if self.s0 <= 0:
            return 0.0
        mu = self.s1 / self.s0
        return math.sqrt(max(self.s2 / self.s0 - mu * mu, 0.0))


@dataclass(frozen=True)
class AdaptiveScore:
    z: float
    flagged: bool


def chart_step(state: AdaptiveChartState, eps: float, elapsed: int = 1
               ) -> Tuple[AdaptiveChartState, AdaptiveScore]:
    """
    One chart update. The test uses the moments before the update; a flagged
    residual only decays the state.
    """
    mu = state.mean
    scale = max(state.sigma, state.sigma_floor)
    z = (eps - mu) / scale
    flagged = z >= state.h
    w = state.decay ** elapsed
    s0, s1, s2 = state.s0 * w, state.s1 * w, state.s2 * w
    if not flagged:
        s0, s1, s2 = s0 + 1.0, s1 + eps, s2 + eps * eps
    last = None if state.last_minute is None else state.last_minute + elapsed
    return replace(state, s0=s0, s1=s1, s2=s2, last_minute=last), AdaptiveScore(z, bool(flagged))


def run_chart(
    residuals: np.ndarray,
    start: int,
    state: AdaptiveChartState,
    first_elapsed: Optional[int] = None,
    flagging: bool = True,
) -> Tuple[np.ndarray, np.ndarray, AdaptiveChartState]:
    """
    Run the chart over a residual series, skipping absent minutes.

    Decay between two observed minutes uses the true elapsed time. The first
    observed minute decays by ``first_elapsed`` when given, otherwise by its
    distance to ``state.last_minute`` (one minute for a fresh state).

    Returns:
        (z, flagged, final state); z is NaN at absent minutes
    """
    z = np.full(residuals.shape[0], np.nan)
    flags = np.zeros(residuals.shape[0], dtype=bool)
    s0, s1, s2 = state.s0, state.s1, state.s2
    d, h, floor = state.decay, state.h, state.sigma_floor
    last = state.last_minute

    for i in np.flatnonzero(~np.isnan(residuals)):
        minute = start + int(i)
        if first_elapsed is not None:
            elapsed, first_elapsed = first_elapsed, None
        elif last is None:
            elapsed = 1
        else:
            elapsed = minute - last
        eps = float(residuals[i])
        if s0 > 0:
            mu = s1 / s0
            sigma = math.sqrt(max(s2 / s0 - mu * mu, 0.0))
        else:
            mu = sigma = 0.0
        score = (eps - mu) / max(sigma, floor)
        flagged = flagging and score >= h
        w = d ** elapsed
        s0 *= w
        s1 *= w
        s2 *= w
        if not flagged:
            s0 += 1.0
            s1 += eps
            s2 += eps * eps
        z[i] = score
        flags[i] = flagged
        last = minute

    return z, flags, replace(state, s0=s0, s1=s1, s2=s2, last_minute=last)


def seed_chart(residuals: np.ndarray, start: int, tau_min: float, h: float,
               sigma_floor: float) -> AdaptiveChartState:
    """
    Warm a fresh chart on residuals with flagging disabled.

    Raises:
        InsufficientDataError: no observed residual to seed from
    """
    fresh = AdaptiveChartState(0.0, 0.0, 0.0, decay_per_minute(tau_min), h, sigma_floor)
    _, _, state = run_chart(residuals, start, fresh, flagging=False)
    if state.s0 <= 0:
        raise InsufficientDataError("no residuals available to seed the control chart")
    return state


def adaptive_score_series(
    model: ForecastModel,
    observed: np.ndarray,
    start: int,
    state: AdaptiveChartState,
    holidays: np.ndarray = np.array([], dtype=np.int64),
    first_elapsed: Optional[int] = 1,
) -> Tuple[np.ndarray, np.ndarray, AdaptiveChartState]:
    """Residuals against the forecast, then the chart, minute by minute."""
    minutes = np.arange(start, start + observed.shape[0], dtype=np.int64)
    residuals = observed - model.predict(minutes, holiday_mask(minutes, holidays))
    return run_chart(residuals, start, state, first_elapsed=first_elapsed)


def sigma_floor_for(series: np.ndarray, params: AdaptiveParams) -> float:
    mean = float(np.nanmean(series)) if np.any(~np.isnan(series)) else 0.0
    return max(params.sigma_floor_min, params.sigma_floor_rel * abs(mean))


@dataclass(frozen=True)
class AdaptiveModel:
    """
    Forecaster, chart seeded on the end of training, and the compound
    survival model of the training z stream.
    """

    cell_id: str
    service: str
    forecast: ForecastModel
    chart: AdaptiveChartState
    z_model: DeviationModel
    tau_min: float
    train_log_scores: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def log_likelihood(self, series: np.ndarray, start: int,
                       holidays: np.ndarray = np.array([], dtype=np.int64)) -> np.ndarray:
        z, _, _ = adaptive_score_series(self.forecast, series, start, self.chart, holidays)
        return self.z_model.log_survival(z)

    def to_artifact(self) -> Tuple[dict, Dict[str, np.ndarray]]:
        f, c, zm = self.forecast, self.chart, self.z_model
        header = {
            'kind': MODEL_KIND,
            'cell_id': self.cell_id,
            'service': self.service,
            't0': f.t0,
            't1': f.t1,
            'intercept': f.intercept,
            'slope': f.slope,
            'holiday': f.holiday,
            'tau_min': self.tau_min,
            'chart': {
                's0': c.s0, 's1': c.s1, 's2': c.s2, 'h': c.h,
                'sigma_floor': c.sigma_floor, 'last_minute': c.last_minute,
            },
            'z_model': {
                'mean': zm.mean, 'std': zm.std, 'h': zm.h, 'theta': zm.theta,
                'p_tail': zm.p_tail, 'alpha': zm.alpha, 'beta': zm.beta,
                'n_exceedances': zm.n_exceedances, 'fallback': zm.fallback,
            },
        }
        arrays = {
            'knots': f.knots, 'deltas': f.deltas, 'fourier': f.fourier, 'z_sample': zm.sample,
        }
        return header, arrays

    @classmethod
    def from_artifact(cls, header: dict, arrays: Dict[str, np.ndarray]) -> 'AdaptiveModel':
        fm = ForecastModel(
            cell_id=header['cell_id'], service=header['service'],
            t0=header['t0'], t1=header['t1'],
            intercept=header['intercept'], slope=header['slope'],
            knots=arrays['knots'], deltas=arrays['deltas'], fourier=arrays['fourier'],
            holiday=header['holiday'],
        )
        ch = header['chart']
        chart = AdaptiveChartState(
            ch['s0'], ch['s1'], ch['s2'], decay_per_minute(header['tau_min']),
            ch['h'], ch['sigma_floor'], ch['last_minute'],
        )
        zm = header['z_model']
        sample = arrays['z_sample']
        sample.setflags(write=False)
        z_model = DeviationModel(sample=sample, **zm)
        return cls(header['cell_id'], header['service'], fm, chart, z_model, header['tau_min'])


class AdaptiveDetector:
    """
    Fits and scores adaptive models for every active pair of a cube.
    """

    def __init__(self, params: AdaptiveParams, holidays: Sequence[str] = (),
                 threads: Optional[int] = None):
        self.params = params
        self.holidays = holiday_days(holidays)
        self.threads = threads

    def fit_pair(self, train: ActivityCube, pair: Pair) -> AdaptiveModel:
        """
        Fit the forecaster, run the chart over the training residuals (seeded
        on the first ``warmup_days``), fit the z survival model, then seed
        the detection chart on the last ``warmup_days``.
        """
        cell_id, service = pair
        p = self.params
        series = train.series(cell_id, service)
        fm = fit_forecaster(
            series, train.start, cell_id, service, self.holidays,
            fourier_order=p.fourier_order, knots_per_month=p.knots_per_month,
            ridge=p.ridge, min_weeks=p.min_weeks,
        )
        minutes = train.minutes
        residuals = series - fm.predict(minutes, holiday_mask(minutes, self.holidays))
        floor = sigma_floor_for(series, p)
        warmup = p.warmup_days * MINUTES_PER_DAY

        observed = np.flatnonzero(~np.isnan(residuals))
        first, last = int(observed[0]), int(observed[-1])
        head = np.full_like(residuals, np.nan)
        head[first:first + warmup] = residuals[first:first + warmup]
        state = seed_chart(head, train.start, p.tau_min, p.h, floor)

        rest = residuals.copy()
        rest[:first + warmup] = np.nan
        z_train, _, _ = run_chart(rest, train.start, state)
        z_model = fit_deviation_model(
            z_train, h=p.tail_h, min_samples=p.min_samples, min_exceedances=p.min_exceedances,
        )

        tail = np.full_like(residuals, np.nan)
        lo = max(last + 1 - warmup, 0)
        tail[lo:last + 1] = residuals[lo:last + 1]
        chart = seed_chart(tail, train.start, p.tau_min, p.h, floor)

        return AdaptiveModel(
            cell_id, service, fm, chart, z_model, p.tau_min,
            train_log_scores=z_model.log_survival(z_train),
        )

    @log_execution_time
    def fit(self, train: ActivityCube, pairs: Iterable[Pair]
            ) -> Tuple[Dict[Pair, AdaptiveModel], Dict[Pair, str]]:
        ordered = sorted(pairs)

        def attempt(pair):
            try:
                return self.fit_pair(train, pair), None
            except (InsufficientDataError, DegenerateModelError) as e:
                return None, f"{e.error_type}: {e.message}"

        models: Dict[Pair, AdaptiveModel] = {}
        demoted: Dict[Pair, str] = {}
        for pair, (model, reason) in zip(ordered, map_ordered(attempt, ordered, self.threads)):
            if model is None:
                demoted[pair] = reason
                logger.warning("Pair demoted to inactive", extra={
                    'cell_id': pair[0], 'service': pair[1], 'reason': reason,
                })
            else:
                models[pair] = model
        return models, demoted

    def score_cell(self, cube: ActivityCube, cell_id: str, services: Tuple[str, ...],
                   models: Mapping[Pair, AdaptiveModel]) -> FusedScores:
        rows = np.full((len(services), cube.n_minutes), np.nan)
        for k, service in enumerate(services):
            model = models.get((cell_id, service))
            if model is not None and service in cube.service_index:
                rows[k] = model.log_likelihood(
                    cube.series(cell_id, service), cube.start, self.holidays
                )
        return fuse_log_scores(cell_id, cube.start, services, rows)

    @log_execution_time
    def score(self, cube: ActivityCube, services: Tuple[str, ...],
              models: Mapping[Pair, AdaptiveModel], cells: Optional[Iterable[str]] = None
              ) -> List[FusedScores]:
        modelled = {c for c, _ in models}
        targets = sorted(modelled if cells is None else set(cells) & modelled)
        return map_ordered(
            lambda cell: self.score_cell(cube, cell, services, models), targets, self.threads
        )

    def training_scores(self, train: ActivityCube, services: Tuple[str, ...],
                        models: Mapping[Pair, AdaptiveModel]) -> List[FusedScores]:
        """In-sample fused scores over the training span, warm-up excluded."""
        out = []
        for cell in sorted({c for c, _ in models}):
            rows = np.full((len(services), train.n_minutes), np.nan)
            for k, service in enumerate(services):
                model = models.get((cell, service))
                if model is not None:
                    cached = model.train_log_scores
                    if cached is None:
                        cached = self.fit_pair(train, (cell, service)).train_log_scores
                    rows[k] = cached
            out.append(fuse_log_scores(cell, train.start, services, rows))
        return out
