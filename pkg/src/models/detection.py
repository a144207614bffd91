"""
Detection results.

Scores are natural-log exceedance likelihoods: 0 means "as common as it gets",
more negative means rarer. Fusion adds them, so the fused score of a minute
is the log of the product of its per-service likelihoods.
"""

from dataclasses import dataclass, field
from typing import Iterator, Tuple

import numpy as np

SERVICE_SEPARATOR = '+'

LEVELS = (0, 1, 2, 3)


def join_services(services) -> str:
    return SERVICE_SEPARATOR.join(services)


def split_services(text: str) -> Tuple[str, ...]:
    return tuple(s for s in text.split(SERVICE_SEPARATOR) if s)


@dataclass(frozen=True)
class LikelihoodScore:
    """Exceedance likelihood of one (cell, minute), possibly fused over services."""

    log_value: float
    services: Tuple[str, ...]

    @property
    def value(self) -> float:
        # never exactly 0, even when exp() underflows
        return max(float(np.exp(self.log_value)), np.finfo(float).tiny)


@dataclass(frozen=True, order=True)
class DetectedAnomaly:
    """One alarm, atomic per antenna and minute. Level 0 is never emitted."""

    minute: int
    cell_id: str
    level: int
    score: float
    services: Tuple[str, ...] = field(compare=False)

    def __post_init__(self):
        if self.level not in LEVELS[1:]:
            raise ValueError(f"alarm level must be 1..3, got {self.level}")

    def to_row(self) -> dict:
        return {
            'minute': self.minute,
            'cell_id': self.cell_id,
            'level': self.level,
            'score': self.score,
            'services': join_services(self.services),
        }


@dataclass(frozen=True)
class FusedScores:
    """
    Fused log-likelihood series of one antenna over [start, start + n).

    ``log_scores`` is NaN where no service produced a score. ``present`` has
    one row per entry of ``services`` and marks which of them contributed to
    each minute.
    """

    cell_id: str
    start: int
    services: Tuple[str, ...]
    log_scores: np.ndarray = field(repr=False)
    present: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.present.shape != (len(self.services), self.log_scores.shape[0]):
            raise ValueError(
                f"presence mask {self.present.shape} does not match "
                f"{len(self.services)} services x {self.log_scores.shape[0]} minutes"
            )

    @property
    def n_minutes(self) -> int:
        return self.log_scores.shape[0]

    def scored(self) -> np.ndarray:
        """Boolean mask of minutes that carry a score."""
        return ~np.isnan(self.log_scores)

    def contributing(self, offset: int) -> Tuple[str, ...]:
        return tuple(s for s, p in zip(self.services, self.present[:, offset]) if p)

    def iter_scored(self) -> Iterator[Tuple[int, float, Tuple[str, ...]]]:
        """(minute, log score, contributing services) for every scored minute."""
        for offset in np.flatnonzero(self.scored()):
            yield self.start + int(offset), float(self.log_scores[offset]), self.contributing(offset)
