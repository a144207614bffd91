"""
Signature detector.

The nominal activity of a (cell, service) pair is its weekly signature: the
per-minute-of-week median over the training weeks, low-pass filtered with a
zero-phase Butterworth filter applied circularly over the week. Deviations
from the signature are pooled over all minutes and modelled by a compound
distribution: the empirical survival below a cut θ = μ + h·σ and a Gamma
tail above it. The exceedance likelihood of a minute is the survival of its
deviation; services are fused by multiplying likelihoods (adding logs).
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Set, Tuple

import numpy as np
from scipy import signal
from scipy.special import digamma, polygamma
from scipy.stats import gamma as gamma_dist

from models.activity import MINUTES_PER_WEEK, ActivityCube, Pair, minute_of_week
from models.detection import FusedScores, LikelihoodScore
from models.errors import DegenerateModelError, InsufficientDataError
from models.run_config import SignatureParams
from utils.logger import log_execution_time, setup_logger
from utils.workers import map_ordered

logger = setup_logger(__name__)

MODEL_KIND = 'signature'

_MLE_TOLERANCE = 1e-10

LOG_FLOOR = float(np.log(np.finfo(float).tiny))


@dataclass(frozen=True)
class WeeklySignature:
    """Nominal 10080-minute profile of one pair, indexed by minute of week."""

    cell_id: str
    service: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.shape != (MINUTES_PER_WEEK,):
            raise ValueError(f"signature must hold {MINUTES_PER_WEEK} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("signature values must be finite")

    def expected(self, minutes) -> np.ndarray:
        return self.values[minute_of_week(minutes)]


def weekly_median(series: np.ndarray, start: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Median of the observed samples of every minute of week.

    Returns:
        (medians, sample counts); slots without samples hold NaN
    """
    slots = minute_of_week(np.arange(start, start + series.shape[0], dtype=np.int64))
    head = int(slots[0])
    n_weeks = -(-(head + series.shape[0]) // MINUTES_PER_WEEK)
    # lay the series on a (weeks, 10080) grid aligned on Monday 00:00
    grid = np.full(n_weeks * MINUTES_PER_WEEK, np.nan)
    grid[head:head + series.shape[0]] = series
    grid = grid.reshape(n_weeks, MINUTES_PER_WEEK)
    counts = np.count_nonzero(~np.isnan(grid), axis=0)
    medians = np.full(MINUTES_PER_WEEK, np.nan)
    has = counts > 0
    if np.any(has):
        medians[has] = np.nanmedian(grid[:, has], axis=0)
    return medians, counts


def circular_lowpass(values: np.ndarray, order: int, cutoff_per_min: float) -> np.ndarray:
    """
    Zero-phase Butterworth low-pass of a periodic series.

    The series is tiled three times and the middle period kept, so the
    filter sees the wrap-around instead of an artificial edge.
    """
    sos = signal.butter(order, cutoff_per_min, btype='lowpass', output='sos', fs=1.0)
    n = values.shape[0]
    tiled = np.concatenate([values, values, values])
    return signal.sosfiltfilt(sos, tiled)[n:2 * n]


def compute_weekly_signature(
    series: np.ndarray,
    start: int,
    cell_id: str,
    service: str,
    order: int = 4,
    cutoff_per_min: float = 1.0 / 120.0,
    min_weeks: float = 3.0,
) -> WeeklySignature:
    """
    Build the weekly signature of one training series.

    Absent minutes are not samples. Minute-of-week slots with no sample at
    all are filled by circular linear interpolation before filtering.

    Raises:
        InsufficientDataError: fewer observed minutes than ``min_weeks`` weeks
    """
    observed = int(np.count_nonzero(~np.isnan(series)))
    if observed < min_weeks * MINUTES_PER_WEEK:
        raise InsufficientDataError(
            f"{cell_id}/{service}: {observed / MINUTES_PER_WEEK:.2f} training weeks, "
            f"need {min_weeks}",
            {'cell_id': cell_id, 'service': service, 'observed_minutes': observed},
        )

    medians, counts = weekly_median(series, start)
    empty = counts == 0
    if np.any(empty):
        logger.warning("Minute-of-week slots without training samples", extra={
            'cell_id': cell_id, 'service': service, 'empty_slots': int(empty.sum()),
        })
        slots = np.arange(MINUTES_PER_WEEK)
        medians[empty] = np.interp(
            slots[empty], slots[~empty], medians[~empty], period=MINUTES_PER_WEEK
        )

    return WeeklySignature(cell_id, service, circular_lowpass(medians, order, cutoff_per_min))


def compute_deviation(observed, signature: WeeklySignature, m):
    """Signed deviation observed - signature[m]."""
    return observed - signature.values[m]


def series_deviations(series: np.ndarray, start: int, signature: WeeklySignature) -> np.ndarray:
    """Deviation of every minute of a series; NaN where the minute is absent."""
    minutes = np.arange(start, start + series.shape[0], dtype=np.int64)
    return series - signature.expected(minutes)


@dataclass(frozen=True)
class DeviationModel:
    """
    Compound empirical + Gamma survival of pooled deviations.

    ``sample`` is the sorted training deviation sample. Below ``theta`` the
    survival is the right-closed empirical rank, floored at ``p_tail``; at
    and above it the survival is ``p_tail`` times the Gamma survival of the
    excess.
    """

    sample: np.ndarray = field(repr=False)
    mean: float
    std: float
    h: float
    theta: float
    p_tail: float
    alpha: float
    beta: float
    n_exceedances: int
    fallback: bool

    @property
    def n(self) -> int:
        return self.sample.shape[0]

    def log_survival(self, eps) -> np.ndarray:
        eps = np.asarray(eps, dtype=float)
        out = np.full(eps.shape, np.nan)
        valid = ~np.isnan(eps)
        below = valid & (eps < self.theta)
        above = valid & (eps >= self.theta)

        at_least = self.n - np.searchsorted(self.sample, eps[below], side='left')
        empirical = np.maximum(at_least / self.n, self.p_tail)
        out[below] = np.log(empirical)
        tail = np.log(self.p_tail) + gamma_dist.logsf(
            eps[above] - self.theta, self.alpha, scale=self.beta
        )
        # scores stay finite
        out[above] = np.maximum(tail, LOG_FLOOR)
        return out

    def survival(self, eps) -> np.ndarray:
        tiny = np.finfo(float).tiny
        log_s = self.log_survival(eps)
        return np.where(np.isnan(log_s), np.nan, np.maximum(np.exp(log_s), tiny))


def fit_gamma_tail(exceedances: np.ndarray, min_exceedances: int = 30,
                   max_steps: int = 50) -> Tuple[float, float, bool]:
    """
    Fit a Gamma distribution to non-negative exceedances.

    Method of moments gives the starting shape; Newton steps on the profile
    likelihood equation ln(α) - ψ(α) = ln(mean) - mean(ln x) refine it.
    Below ``min_exceedances`` values the fit falls back to an exponential
    with the sample mean as scale.

    Returns:
        (alpha, beta, fallback)
    """
    x = np.asarray(exceedances, dtype=float)
    mean = float(x.mean()) if x.size else 0.0
    if x.size < min_exceedances or mean <= 0:
        return 1.0, mean, True

    var = float(x.var())
    alpha = mean * mean / var if var > 0 else 1.0

    positive = x[x > 0]
    if positive.size >= 2:
        s = np.log(positive.mean()) - np.log(positive).mean()
        if s > 0:
            for _ in range(max_steps):
                f = np.log(alpha) - digamma(alpha) - s
                df = 1.0 / alpha - polygamma(1, alpha)
                step = f / df
                nxt = alpha - step
                while nxt <= 0:
                    step /= 2.0
                    nxt = alpha - step
                converged = abs(nxt - alpha) <= _MLE_TOLERANCE * alpha
                alpha = float(nxt)
                if converged:
                    break
            mean = float(positive.mean())
    return float(alpha), mean / float(alpha), False


def fit_deviation_model(
    train_deviations: np.ndarray,
    h: float = 2.32,
    min_samples: int = 10080,
    min_exceedances: int = 30,
    mle_max_steps: int = 50,
) -> DeviationModel:
    """
    Raises:
        InsufficientDataError: fewer than ``min_samples`` finite deviations
        DegenerateModelError: zero variance, or no deviation reaches θ
    """
    sample = np.sort(np.asarray(train_deviations, dtype=float))
    sample = sample[~np.isnan(sample)]
    if sample.size < min_samples:
        raise InsufficientDataError(
            f"{sample.size} deviation samples, need {min_samples}",
            {'samples': int(sample.size)},
        )
    mean = float(sample.mean())
    std = float(sample.std())
    if std == 0.0:
        raise DegenerateModelError("deviation sample has zero variance")

    theta = mean + h * std
    tail = sample[sample >= theta]
    if tail.size == 0:
        raise DegenerateModelError(f"no training deviation reaches the tail cut {theta:g}")
    p_tail = tail.size / sample.size

    alpha, beta, fallback = fit_gamma_tail(tail - theta, min_exceedances, mle_max_steps)
    if beta <= 0:
        raise DegenerateModelError("tail exceedances are all zero")
    sample.setflags(write=False)
    return DeviationModel(
        sample=sample, mean=mean, std=std, h=h, theta=theta, p_tail=p_tail,
        alpha=alpha, beta=beta, n_exceedances=int(tail.size), fallback=fallback,
    )


def exceedance_likelihood(model: DeviationModel, eps: float) -> float:
    """P[X >= eps] under the compound deviation model, in (0, 1]."""
    return float(model.survival(np.array([eps]))[0])


def fuse_likelihoods(scores: Mapping[str, Optional[float]]) -> Optional[LikelihoodScore]:
    """
    Product of the per-service likelihoods that are present, accumulated in
    log space. Services mapped to None have no model and are skipped.

    Returns:
        None when no service contributed
    """
    present = sorted((s, v) for s, v in scores.items() if v is not None)
    if not present:
        return None
    log_value = float(sum(np.log(v) for _, v in present))
    return LikelihoodScore(log_value, tuple(s for s, _ in present))


def fuse_log_scores(cell_id: str, start: int, services: Tuple[str, ...],
                    log_scores: np.ndarray) -> FusedScores:
    """
    Vectorised fusion over a (services, minutes) array of log likelihoods
    with NaN for absent factors.
    """
    present = ~np.isnan(log_scores)
    fused = np.where(present, log_scores, 0.0).sum(axis=0)
    fused[~present.any(axis=0)] = np.nan
    return FusedScores(cell_id, start, services, fused, present)


@dataclass(frozen=True)
class SignatureModel:
    cell_id: str
    service: str
    signature: WeeklySignature
    deviation: DeviationModel

    def log_likelihood(self, series: np.ndarray, start: int) -> np.ndarray:
        return self.deviation.log_survival(series_deviations(series, start, self.signature))

    def to_artifact(self) -> Tuple[dict, Dict[str, np.ndarray]]:
        d = self.deviation
        header = {
            'kind': MODEL_KIND,
            'cell_id': self.cell_id,
            'service': self.service,
            'mean': d.mean,
            'std': d.std,
            'h': d.h,
            'theta': d.theta,
            'p_tail': d.p_tail,
            'alpha': d.alpha,
            'beta': d.beta,
            'n_samples': d.n,
            'n_exceedances': d.n_exceedances,
            'fallback': d.fallback,
        }
        return header, {'signature': self.signature.values, 'sample': d.sample}

    @classmethod
    def from_artifact(cls, header: dict, arrays: Dict[str, np.ndarray]) -> 'SignatureModel':
        sample = arrays['sample']
        sample.setflags(write=False)
        deviation = DeviationModel(
            sample=sample, mean=header['mean'], std=header['std'], h=header['h'],
            theta=header['theta'], p_tail=header['p_tail'], alpha=header['alpha'],
            beta=header['beta'], n_exceedances=header['n_exceedances'],
            fallback=header['fallback'],
        )
        signature = WeeklySignature(header['cell_id'], header['service'], arrays['signature'])
        return cls(header['cell_id'], header['service'], signature, deviation)


class SignatureDetector:
    """
    Fits and scores signature models for every active pair of a cube.
    """

    def __init__(self, params: SignatureParams, threads: Optional[int] = None):
        self.params = params
        self.threads = threads

    def fit_pair(self, train: ActivityCube, pair: Pair) -> SignatureModel:
        cell_id, service = pair
        p = self.params
        series = train.series(cell_id, service)
        sig = compute_weekly_signature(
            series, train.start, cell_id, service,
            order=p.butter_order, cutoff_per_min=p.butter_cutoff_per_min, min_weeks=p.min_weeks,
        )
        deviation = fit_deviation_model(
            series_deviations(series, train.start, sig),
            h=p.h, min_samples=p.min_samples,
            min_exceedances=p.min_exceedances, mle_max_steps=p.mle_max_steps,
        )
        if deviation.fallback:
            logger.info("Exponential tail fallback", extra={
                'cell_id': cell_id, 'service': service, 'exceedances': deviation.n_exceedances,
            })
        return SignatureModel(cell_id, service, sig, deviation)

    @log_execution_time
    def fit(self, train: ActivityCube, pairs: Iterable[Pair]
            ) -> Tuple[Dict[Pair, SignatureModel], Dict[Pair, str]]:
        """
        Fit every pair; failures demote the pair instead of aborting.

        Returns:
            (models, demoted pairs with their reason)
        """
        ordered = sorted(pairs)

        def attempt(pair):
            try:
                return self.fit_pair(train, pair), None
            except (InsufficientDataError, DegenerateModelError) as e:
                return None, f"{e.error_type}: {e.message}"

        models: Dict[Pair, SignatureModel] = {}
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
                   models: Mapping[Pair, SignatureModel]) -> FusedScores:
        """Fused log-likelihood series of one cell over the cube span."""
        rows = np.full((len(services), cube.n_minutes), np.nan)
        for k, service in enumerate(services):
            model = models.get((cell_id, service))
            if model is not None and service in cube.service_index:
                rows[k] = model.log_likelihood(cube.series(cell_id, service), cube.start)
        return fuse_log_scores(cell_id, cube.start, services, rows)

    @log_execution_time
    def score(self, cube: ActivityCube, services: Tuple[str, ...],
              models: Mapping[Pair, SignatureModel], cells: Optional[Iterable[str]] = None
              ) -> List[FusedScores]:
        """Fused scores for each cell with at least one model, in cell order."""
        modelled: Set[str] = {c for c, _ in models}
        targets = sorted(modelled if cells is None else set(cells) & modelled)
        return map_ordered(
            lambda cell: self.score_cell(cube, cell, services, models), targets, self.threads
        )
