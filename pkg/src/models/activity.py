"""
Activity data model.

Minutes are integers counted from the Unix epoch (UTC). The epoch fell on a
Thursday, so minute-of-week is shifted by three days to anchor it on
Monday 00:00.

An ActivityCube stores counts as a dense float array of shape
(cells, services, minutes); NaN marks an absent minute, never zero traffic.
"""

from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from typing import Dict, Iterable, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np
from dateutil.parser import isoparse

from models.errors import ActivityParseError, FoldSpecError

MINUTES_PER_DAY = 1440
MINUTES_PER_WEEK = 7 * MINUTES_PER_DAY
_MONDAY_SHIFT = 3 * MINUTES_PER_DAY

DEFAULT_SERVICES = ('call3g', 'call4g', 'sms3g', 'sms4g')

Pair = Tuple[str, str]


def minute_of_week(t):
    """Minute of week in [0, 10080), Monday 00:00 UTC = 0. Works on arrays."""
    if isinstance(t, (int, np.integer)):
        return int((t + _MONDAY_SHIFT) % MINUTES_PER_WEEK)
    return (np.asarray(t, dtype=np.int64) + _MONDAY_SHIFT) % MINUTES_PER_WEEK


def week_index(t):
    """Index of the Monday-anchored week containing minute t."""
    if isinstance(t, (int, np.integer)):
        return int((t + _MONDAY_SHIFT) // MINUTES_PER_WEEK)
    return (np.asarray(t, dtype=np.int64) + _MONDAY_SHIFT) // MINUTES_PER_WEEK


def parse_minute(text: str) -> int:
    """
    Parse an ISO-8601 UTC timestamp truncated to the minute, or an integer
    count of epoch minutes.

    Raises:
        ValueError: unparseable text, non-UTC offset, or non-zero seconds
    """
    text = text.strip()
    if text.lstrip('-').isdigit():
        return int(text)
    parsed = isoparse(text)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    if parsed.utcoffset().total_seconds() != 0:
        parsed = parsed.astimezone(timezone.utc)
    if parsed.second or parsed.microsecond:
        raise ValueError(f"timestamp not truncated to the minute: {text}")
    return int(parsed.timestamp()) // 60


def format_minute(t: int) -> str:
    """Canonical ISO-8601 rendering, e.g. 2019-04-15T18:52Z."""
    return datetime.fromtimestamp(int(t) * 60, tz=timezone.utc).strftime('%Y-%m-%dT%H:%MZ')


def day_of_minute(t):
    """Epoch day index of minute t (array-friendly)."""
    return np.asarray(t) // MINUTES_PER_DAY


@dataclass(frozen=True)
class Cell:
    """An antenna with its WGS84 location."""

    cell_id: str
    lat: float
    lon: float

    def __post_init__(self):
        if not self.cell_id:
            raise ValueError("cell id must be non-empty")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range for {self.cell_id}: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range for {self.cell_id}: {self.lon}")


class CellRegistry(Mapping[str, Cell]):
    """Cell id -> Cell, ids unique."""

    def __init__(self, cells: Iterable[Cell]):
        self._cells: Dict[str, Cell] = {}
        for cell in cells:
            if cell.cell_id in self._cells:
                raise ActivityParseError(f"duplicate cell id in registry: {cell.cell_id}")
            self._cells[cell.cell_id] = cell

    def __getitem__(self, cell_id: str) -> Cell:
        return self._cells[cell_id]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._cells))

    def __len__(self) -> int:
        return len(self._cells)

    def coordinates(self, cell_ids: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Latitude and longitude arrays in the order of ``cell_ids``."""
        lats = np.array([self._cells[c].lat for c in cell_ids], dtype=float)
        lons = np.array([self._cells[c].lon for c in cell_ids], dtype=float)
        return lats, lons


@dataclass(frozen=True)
class ActivityCube:
    """
    Minute-indexed counts per (cell, service) over the contiguous span
    [start, start + n_minutes).
    """

    cells: Tuple[str, ...]
    services: Tuple[str, ...]
    start: int
    counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.ndim != 3 or counts.shape[:2] != (len(self.cells), len(self.services)):
            raise ValueError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.cells)} cells x {len(self.services)} services"
            )
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("cell ids must be unique within a cube")
        if not self.services:
            raise ValueError("a cube needs at least one service")
        if np.any(counts[~np.isnan(counts)] < 0):
            raise ValueError("counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, 'counts', counts)

    @property
    def n_minutes(self) -> int:
        return self.counts.shape[2]

    @property
    def end(self) -> int:
        """Exclusive end minute."""
        return self.start + self.n_minutes

    @cached_property
    def minutes(self) -> np.ndarray:
        return np.arange(self.start, self.end, dtype=np.int64)

    @cached_property
    def cell_index(self) -> Dict[str, int]:
        return {c: i for i, c in enumerate(self.cells)}

    @cached_property
    def service_index(self) -> Dict[str, int]:
        return {s: i for i, s in enumerate(self.services)}

    def pairs(self) -> Iterator[Pair]:
        for cell in self.cells:
            for service in self.services:
                yield cell, service

    def series(self, cell_id: str, service: str) -> np.ndarray:
        """Read-only minute series of one pair (NaN = absent)."""
        return self.counts[self.cell_index[cell_id], self.service_index[service]]

    def observed_minutes(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.counts)))

    def total(self) -> float:
        return float(np.nansum(self.counts))

    def restrict(self, start: int, end: int) -> 'ActivityCube':
        """Sub-cube on [start, end), which must lie inside the span."""
        if start < self.start or end > self.end or start >= end:
            raise FoldSpecError(
                f"interval [{start}, {end}) outside cube span [{self.start}, {self.end})"
            )
        lo, hi = start - self.start, end - self.start
        return ActivityCube(self.cells, self.services, start, self.counts[:, :, lo:hi].copy())

    def mask(self, start: int, end: int) -> 'ActivityCube':
        """Same span with minutes in [start, end) made absent."""
        counts = self.counts.copy()
        lo, hi = max(start - self.start, 0), min(end - self.start, self.n_minutes)
        if lo < hi:
            counts[:, :, lo:hi] = np.nan
        return ActivityCube(self.cells, self.services, self.start, counts)

    def select_services(self, services: Sequence[str]) -> 'ActivityCube':
        missing = [s for s in services if s not in self.service_index]
        if missing:
            raise ValueError(f"services not present in cube: {missing}")
        idx = [self.service_index[s] for s in services]
        return ActivityCube(self.cells, tuple(services), self.start, self.counts[:, idx, :].copy())

    def select_cells(self, cells: Sequence[str]) -> 'ActivityCube':
        idx = [self.cell_index[c] for c in cells]
        return ActivityCube(tuple(cells), self.services, self.start, self.counts[idx].copy())


@dataclass(frozen=True)
class FoldSpec:
    """
    Train/test split over whole days of the cube span.

    ``test_days`` lists explicit (first_day, end_day) test intervals as day
    offsets from the span start, end exclusive; when omitted the span is cut
    into ``n_folds`` contiguous chunks of whole days, the last one absorbing
    any remainder.
    """

    n_folds: int = 3
    test_days: Optional[Tuple[Tuple[int, int], ...]] = None

    def __post_init__(self):
        if self.test_days is not None:
            object.__setattr__(
                self, 'test_days', tuple((int(a), int(b)) for a, b in self.test_days)
            )
            object.__setattr__(self, 'n_folds', len(self.test_days))
        if self.n_folds < 1:
            raise FoldSpecError(f"fold count must be >= 1, got {self.n_folds}")

    def intervals(self, start: int, end: int) -> Tuple[Tuple[int, int], ...]:
        """Test intervals in minutes for a cube spanning [start, end)."""
        if self.test_days is not None:
            return tuple(
                (start + a * MINUTES_PER_DAY, start + b * MINUTES_PER_DAY)
                for a, b in self.test_days
            )
        total_days = (end - start) // MINUTES_PER_DAY
        if total_days < self.n_folds:
            raise FoldSpecError(
                f"span of {total_days} whole days cannot hold {self.n_folds} folds"
            )
        per_fold = total_days // self.n_folds
        bounds = []
        for k in range(self.n_folds):
            lo = start + k * per_fold * MINUTES_PER_DAY
            hi = end if k == self.n_folds - 1 else lo + per_fold * MINUTES_PER_DAY
            bounds.append((lo, hi))
        return tuple(bounds)

    def to_dict(self) -> dict:
        return {
            'n_folds': self.n_folds,
            'test_days': [list(d) for d in self.test_days] if self.test_days is not None else None,
        }
