"""
Anomaly levels.

Scores are log likelihoods, so rarer means lower. For every antenna and
every target frequency the threshold is the training score of rank
⌈N·f⌉ counted from the rare end; a score at or below a threshold crosses it.
Levels 1, 2 and 3 correspond to one crossing every 4 hours, every day and
every week on average. The 8 h, 12 h and 2 d thresholds only select alarms
for precision/recall curves.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from models.activity import MINUTES_PER_WEEK
from models.detection import DetectedAnomaly, FusedScores
from models.run_config import SENSITIVITIES
from utils.logger import setup_logger

logger = setup_logger(__name__)

LEVEL_SENSITIVITY = {1: '4h', 2: '1d', 3: '1w'}


@dataclass(frozen=True)
class LevelThresholds:
    """
    Per-antenna thresholds keyed by sensitivity name. A None threshold can
    never be crossed (the training scores were too tied to reach the rank).
    """

    thresholds: Dict[str, Dict[str, Optional[float]]]
    uncalibrated: Tuple[str, ...] = ()
    training_minutes: Dict[str, int] = field(default_factory=dict)

    def for_cell(self, cell_id: str) -> Optional[Dict[str, Optional[float]]]:
        return self.thresholds.get(cell_id)

    def to_dict(self) -> dict:
        return {
            'thresholds': self.thresholds,
            'uncalibrated': list(self.uncalibrated),
            'training_minutes': self.training_minutes,
            'frequencies_per_minute': {k: 1.0 / v for k, v in SENSITIVITIES.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'LevelThresholds':
        return cls(
            thresholds={c: dict(t) for c, t in data['thresholds'].items()},
            uncalibrated=tuple(data.get('uncalibrated', ())),
            training_minutes=dict(data.get('training_minutes', {})),
        )


def rank_threshold(sorted_scores: np.ndarray, rank: int) -> Optional[float]:
    """
    Score of the given rank (1 = rarest) in an ascending array. When ties
    at that rank would let more than ``rank`` scores cross, the next rarer
    distinct value is used instead; None when there is none.
    """
    value = sorted_scores[rank - 1]
    if np.searchsorted(sorted_scores, value, side='right') <= rank:
        return float(value)
    lo = int(np.searchsorted(sorted_scores, value, side='left'))
    if lo == 0:
        return None
    return float(sorted_scores[lo - 1])


def calibrate_thresholds(
    train_scores: Mapping[str, np.ndarray],
    frequencies: Optional[Mapping[str, int]] = None,
    min_minutes: int = MINUTES_PER_WEEK,
) -> LevelThresholds:
    """
    Args:
        train_scores: Antenna -> training log-likelihood series (NaN ignored)
        frequencies: Sensitivity name -> expected minutes between crossings
        min_minutes: Antennas with fewer scored minutes stay uncalibrated

    Returns:
        LevelThresholds; antennas with no score are left out entirely,
        antennas with constant or too few scores are listed as uncalibrated
    """
    frequencies = dict(frequencies or SENSITIVITIES)
    thresholds: Dict[str, Dict[str, Optional[float]]] = {}
    uncalibrated: List[str] = []
    counts: Dict[str, int] = {}

    for cell_id in sorted(train_scores):
        scores = np.asarray(train_scores[cell_id], dtype=float)
        scores = np.sort(scores[~np.isnan(scores)])
        n = int(scores.size)
        if n == 0:
            logger.info("Antenna without training scores excluded", extra={'cell_id': cell_id})
            continue
        counts[cell_id] = n
        if n < min_minutes or scores[0] == scores[-1]:
            logger.warning("Antenna cannot be calibrated", extra={
                'cell_id': cell_id, 'scored_minutes': n, 'constant': bool(scores[0] == scores[-1]),
            })
            uncalibrated.append(cell_id)
            continue
        thresholds[cell_id] = {
            name: rank_threshold(scores, min(n, math.ceil(n / period)))
            for name, period in frequencies.items()
        }

    logger.info("Thresholds calibrated", extra={
        'calibrated': len(thresholds), 'uncalibrated': len(uncalibrated),
    })
    return LevelThresholds(thresholds, tuple(uncalibrated), counts)


def crosses(score: float, threshold: Optional[float]) -> bool:
    return threshold is not None and not math.isnan(score) and score <= threshold


def assign_level(score: float, cell_thresholds: Optional[Mapping[str, Optional[float]]]) -> int:
    """Highest canonical level whose threshold the score crosses; 0 when uncalibrated."""
    if not cell_thresholds:
        return 0
    level = 0
    for lvl, name in LEVEL_SENSITIVITY.items():
        if crosses(score, cell_thresholds.get(name)):
            level = lvl
    return level


def assign_levels(log_scores: np.ndarray,
                  cell_thresholds: Optional[Mapping[str, Optional[float]]]) -> np.ndarray:
    levels = np.zeros(log_scores.shape[0], dtype=np.int8)
    if not cell_thresholds:
        return levels
    scored = ~np.isnan(log_scores)
    for lvl, name in LEVEL_SENSITIVITY.items():
        threshold = cell_thresholds.get(name)
        if threshold is not None:
            levels[scored & (log_scores <= threshold)] = lvl
    return levels


def detect_alarms(fused: Iterable[FusedScores], thresholds: LevelThresholds
                  ) -> List[DetectedAnomaly]:
    """Every level >= 1 alarm, ordered by minute then antenna."""
    alarms = []
    for series in fused:
        cell_thresholds = thresholds.for_cell(series.cell_id)
        levels = assign_levels(series.log_scores, cell_thresholds)
        for offset in np.flatnonzero(levels):
            alarms.append(DetectedAnomaly(
                minute=series.start + int(offset),
                cell_id=series.cell_id,
                level=int(levels[offset]),
                score=float(series.log_scores[offset]),
                services=series.contributing(int(offset)),
            ))
    alarms.sort()
    return alarms


def select_alarms(alarms: Iterable[DetectedAnomaly], thresholds: LevelThresholds,
                  sensitivity: str) -> List[DetectedAnomaly]:
    """
    Alarms crossing the given sensitivity threshold of their antenna. Every
    sensitivity is at most as frequent as 4 h, so the level >= 1 stream
    contains all of them.
    """
    if sensitivity not in SENSITIVITIES:
        raise ValueError(f"unknown sensitivity '{sensitivity}'")
    selected = []
    for alarm in alarms:
        cell_thresholds = thresholds.for_cell(alarm.cell_id)
        if cell_thresholds and crosses(alarm.score, cell_thresholds.get(sensitivity)):
            selected.append(alarm)
    return selected


def level_rates(alarms: Sequence[DetectedAnomaly], antenna_minutes: int) -> Dict[int, float]:
    """Rate of level >= L alarms per antenna-minute, for L = 1..3."""
    if antenna_minutes <= 0:
        return {lvl: 0.0 for lvl in LEVEL_SENSITIVITY}
    levels = np.array([a.level for a in alarms], dtype=int)
    return {lvl: float(np.count_nonzero(levels >= lvl)) / antenna_minutes for lvl in LEVEL_SENSITIVITY}
