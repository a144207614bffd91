"""
Evaluation against the Uncommon Event database (DBUE).

Every event expands into a ground-truth footprint: the antennas within its
radius of any epicenter, times its tolerance window(s). Alarms are then
counted per antenna-minute against the union of footprints (confusion
matrix, precision, minute-wise recall) and per event (event-wise recall,
detection latency).
"""

from dataclasses import dataclass, field
from datetime import datetime, time, timezone
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dateutil.parser import isoparse

from models.activity import CellRegistry, format_minute, parse_minute
from models.detection import DetectedAnomaly, join_services
from models.errors import DbueValidationError, IncompleteCurveError
from models.run_config import SENSITIVITIES
from utils.artifacts import read_json
from utils.geo import haversine_m
from utils.logger import setup_logger

logger = setup_logger(__name__)

DEFAULT_DETECTION_WINDOW_MIN = 15

_DBUE_KEYS = {
    'id', 'label', 'epicenters', 'start', 'end', 'days', 'radius_m', 'pre_buffer_min',
    'post_buffer_min', 'detection_window_min', 'description', 'sources',
}


@dataclass(frozen=True)
class EventDay:
    """Daily window of a multi-day event, times in UTC."""

    date: str
    start_time: str
    end_time: str


@dataclass(frozen=True)
class UncommonEvent:
    event_id: str
    epicenters: Tuple[Tuple[float, float], ...]
    start: int
    end: Optional[int] = None
    days: Tuple[EventDay, ...] = ()
    radius_m: Optional[float] = None
    pre_buffer_min: int = 0
    post_buffer_min: int = 0
    detection_window_min: int = DEFAULT_DETECTION_WINDOW_MIN
    label: str = ''
    description: str = ''
    sources: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.epicenters:
            raise ValueError("at least one epicenter is required")
        for lat, lon in self.epicenters:
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
                raise ValueError(f"epicenter out of range: ({lat}, {lon})")
        if self.end is not None and self.end <= self.start:
            raise ValueError("end must be after start")
        if self.radius_m is not None and self.radius_m <= 0:
            raise ValueError("radius_m must be positive")
        if self.pre_buffer_min < 0 or self.post_buffer_min < 0:
            raise ValueError("buffers must be non-negative")
        if self.detection_window_min <= 0:
            raise ValueError("detection_window_min must be positive")

    def windows(self) -> List[Tuple[int, int]]:
        """Closed minute intervals [lo, hi] of the tolerance window(s)."""
        if self.days:
            out = []
            for day in self.days:
                lo = _day_minute(day.date, day.start_time)
                hi = _day_minute(day.date, day.end_time)
                if hi < lo:
                    raise ValueError(f"day window ends before it starts on {day.date}")
                out.append((lo - self.pre_buffer_min, hi + self.post_buffer_min))
            return out
        if self.end is not None:
            return [(self.start - self.pre_buffer_min, self.end + self.post_buffer_min)]
        return [(self.start - self.pre_buffer_min, self.start + self.detection_window_min)]

    def to_dict(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {
            'id': self.event_id,
            'label': self.label,
            'epicenters': [{'lat': lat, 'lon': lon} for lat, lon in self.epicenters],
            'start': format_minute(self.start),
        }
        if self.end is not None:
            record['end'] = format_minute(self.end)
        if self.days:
            record['days'] = [
                {'date': d.date, 'start_time': d.start_time, 'end_time': d.end_time}
                for d in self.days
            ]
        if self.radius_m is not None:
            record['radius_m'] = self.radius_m
        if self.pre_buffer_min:
            record['pre_buffer_min'] = self.pre_buffer_min
        if self.post_buffer_min:
            record['post_buffer_min'] = self.post_buffer_min
        if self.detection_window_min != DEFAULT_DETECTION_WINDOW_MIN:
            record['detection_window_min'] = self.detection_window_min
        if self.description:
            record['description'] = self.description
        if self.sources:
            record['sources'] = list(self.sources)
        return record


def _day_minute(day: str, clock: str) -> int:
    d = isoparse(day).date()
    t = time.fromisoformat(clock)
    return int(datetime.combine(d, t, tzinfo=timezone.utc).timestamp()) // 60


def parse_event(record: Any) -> UncommonEvent:
    """
    Raises:
        ValueError: the record violates the DBUE schema, with the reason
    """
    if not isinstance(record, dict):
        raise ValueError("record is not an object")
    unknown = sorted(set(record) - _DBUE_KEYS)
    if unknown:
        raise ValueError(f"unknown fields {unknown}")
    if record.get('id') in (None, ''):
        raise ValueError("missing id")
    if not record.get('start'):
        raise ValueError("missing start")
    epicenters = record.get('epicenters')
    if not epicenters:
        raise ValueError("missing epicenter")
    try:
        points = tuple((float(p['lat']), float(p['lon'])) for p in epicenters)
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed epicenter: {e}") from e

    try:
        days = tuple(
            EventDay(str(d['date']), str(d['start_time']), str(d['end_time']))
            for d in record.get('days') or ()
        )
    except (KeyError, TypeError) as e:
        raise ValueError(f"malformed day window: {e}") from e
    event = UncommonEvent(
        event_id=str(record['id']),
        epicenters=points,
        start=parse_minute(str(record['start'])),
        end=parse_minute(str(record['end'])) if record.get('end') else None,
        days=days,
        radius_m=float(record['radius_m']) if record.get('radius_m') is not None else None,
        pre_buffer_min=int(record.get('pre_buffer_min') or 0),
        post_buffer_min=int(record.get('post_buffer_min') or 0),
        detection_window_min=int(record.get('detection_window_min') or DEFAULT_DETECTION_WINDOW_MIN),
        label=str(record.get('label') or ''),
        description=str(record.get('description') or ''),
        sources=tuple(str(s) for s in record.get('sources') or ()),
    )
    event.windows()
    return event


def parse_dbue(document: Any) -> Tuple[List[UncommonEvent], List[Dict[str, Any]]]:
    """
    Validate every record of a DBUE document (a list, or an object with an
    ``events`` list).

    Returns:
        (accepted events, rejections as {index, id, reason})

    Raises:
        DbueValidationError: the document itself is not a record list
    """
    records = document.get('events') if isinstance(document, dict) else document
    if not isinstance(records, list):
        raise DbueValidationError("DBUE must be a list of event records")

    events: List[UncommonEvent] = []
    rejected: List[Dict[str, Any]] = []
    seen = set()
    for index, record in enumerate(records):
        record_id = record.get('id') if isinstance(record, dict) else None
        try:
            event = parse_event(record)
            if event.event_id in seen:
                raise ValueError(f"duplicate id {event.event_id}")
        except (ValueError, OverflowError) as e:
            rejected.append({'index': index, 'id': record_id, 'reason': str(e)})
            logger.warning("DBUE record rejected", extra={
                'index': index, 'event_id': record_id, 'reason': str(e),
            })
            continue
        seen.add(event.event_id)
        events.append(event)
    return events, rejected


def load_dbue(path: str) -> List[UncommonEvent]:
    events, rejected = parse_dbue(read_json(path, what='DBUE'))
    logger.info("DBUE loaded", extra={
        'path': path, 'accepted': len(events), 'rejected': len(rejected),
    })
    return events


def dbue_document(events: Iterable[UncommonEvent]) -> List[Dict[str, Any]]:
    return [e.to_dict() for e in events]


@dataclass(frozen=True)
class EventFootprint:
    """Sub-mask of one event: antenna indices x half-open minute offsets."""

    event_id: str
    start: int
    cell_indices: np.ndarray
    intervals: Tuple[Tuple[int, int], ...]

    @property
    def empty(self) -> bool:
        return self.cell_indices.size == 0 or not self.intervals


@dataclass(frozen=True)
class GroundTruthMask:
    """
    Union of event footprints over the evaluated grid (cells x minutes
    [start, start + n_minutes)).
    """

    cells: Tuple[str, ...]
    start: int
    n_minutes: int
    mask: np.ndarray = field(repr=False)
    footprints: Tuple[EventFootprint, ...] = ()
    undetectable: Tuple[str, ...] = ()
    out_of_span: Tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    @property
    def total(self) -> int:
        return len(self.cells) * self.n_minutes

    def submask(self, footprint: EventFootprint) -> np.ndarray:
        sub = np.zeros_like(self.mask)
        for lo, hi in footprint.intervals:
            sub[np.ix_(footprint.cell_indices, np.arange(lo, hi))] = True
        return sub


def antennas_in_range(event: UncommonEvent, registry: CellRegistry, cells: Sequence[str],
                      default_radius_m: float) -> np.ndarray:
    """Indices into ``cells`` within the event radius of any epicenter (inclusive)."""
    radius = event.radius_m if event.radius_m is not None else default_radius_m
    lats, lons = registry.coordinates(cells)
    inside = np.zeros(len(cells), dtype=bool)
    for lat, lon in event.epicenters:
        inside |= haversine_m(lat, lon, lats, lons) <= radius
    return np.flatnonzero(inside)


def expand_ground_truth(
    events: Sequence[UncommonEvent],
    registry: CellRegistry,
    default_radius_m: float = 300.0,
    cells: Optional[Sequence[str]] = None,
    span: Optional[Tuple[int, int]] = None,
) -> GroundTruthMask:
    """
    Build the ground-truth mask over ``cells`` (default: the whole registry)
    and the half-open minute span. Events whose windows miss the span are
    listed as out of span; events inside it with no antenna in range are
    undetectable.
    """
    cells = tuple(cells if cells is not None else registry)
    if span is None:
        bounds = [w for e in events for w in e.windows()]
        span = (min(lo for lo, _ in bounds), max(hi for _, hi in bounds) + 1) if bounds else (0, 0)
    start, end = span
    n_minutes = end - start
    mask = np.zeros((len(cells), max(n_minutes, 0)), dtype=bool)

    footprints: List[EventFootprint] = []
    undetectable: List[str] = []
    out_of_span: List[str] = []
    for event in events:
        intervals = []
        for lo, hi in event.windows():
            a, b = max(lo, start), min(hi + 1, end)
            if a < b:
                intervals.append((a - start, b - start))
        if not intervals:
            out_of_span.append(event.event_id)
            continue
        idx = antennas_in_range(event, registry, cells, default_radius_m)
        if idx.size == 0:
            logger.warning("Event has no antenna in range", extra={'event_id': event.event_id})
            undetectable.append(event.event_id)
        footprint = EventFootprint(event.event_id, event.start, idx, tuple(intervals))
        for a, b in footprint.intervals:
            mask[idx, a:b] = True
        footprints.append(footprint)

    return GroundTruthMask(
        cells, start, n_minutes, mask, tuple(footprints), tuple(undetectable), tuple(out_of_span)
    )


def noskill_baselines(mask_size: int, total_minutes: int, rate: float) -> Tuple[float, float]:
    """
    Precision and recall of a detector alarming at random with the given
    rate per antenna-minute.
    """
    if total_minutes <= 0:
        raise ValueError("total_minutes must be positive")
    return mask_size / total_minutes, float(rate)


@dataclass(frozen=True)
class EvaluationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: Optional[float]
    recall_minute: Optional[float]
    recall_event: Optional[float]
    events_total: int
    events_detected: int
    noskill_precision: float
    noskill_recall: float
    min_level: int = 1
    min_alarms: int = 1
    sensitivity: Optional[str] = None
    events: Tuple[Dict[str, Any], ...] = ()
    undetectable: Tuple[str, ...] = ()
    out_of_span: Tuple[str, ...] = ()
    fingerprint: Optional[str] = None

    @property
    def evaluated(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> Dict[str, Any]:
        return {
            'confusion': {'tp': self.tp, 'fp': self.fp, 'fn': self.fn, 'tn': self.tn},
            'evaluated_antenna_minutes': self.evaluated,
            'precision': self.precision,
            'recall_minute': self.recall_minute,
            'recall_event': self.recall_event,
            'events_total': self.events_total,
            'events_detected': self.events_detected,
            'noskill': {'precision': self.noskill_precision, 'recall': self.noskill_recall},
            'min_level': self.min_level,
            'min_alarms': self.min_alarms,
            'sensitivity': self.sensitivity,
            'events': list(self.events),
            'undetectable': list(self.undetectable),
            'out_of_span': list(self.out_of_span),
            'fingerprint': self.fingerprint,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'EvaluationReport':
        confusion = data['confusion']
        return cls(
            tp=confusion['tp'], fp=confusion['fp'], fn=confusion['fn'], tn=confusion['tn'],
            precision=data['precision'],
            recall_minute=data['recall_minute'],
            recall_event=data['recall_event'],
            events_total=data['events_total'],
            events_detected=data['events_detected'],
            noskill_precision=data['noskill']['precision'],
            noskill_recall=data['noskill']['recall'],
            min_level=data.get('min_level', 1),
            min_alarms=data.get('min_alarms', 1),
            sensitivity=data.get('sensitivity'),
            events=tuple(data.get('events', ())),
            undetectable=tuple(data.get('undetectable', ())),
            out_of_span=tuple(data.get('out_of_span', ())),
            fingerprint=data.get('fingerprint'),
        )


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def score_run(
    alarms: Iterable[DetectedAnomaly],
    mask: GroundTruthMask,
    level: int = 1,
    n: int = 1,
    rate: Optional[float] = None,
    exclude_undetectable: bool = False,
    sensitivity: Optional[str] = None,
    fingerprint: Optional[str] = None,
) -> EvaluationReport:
    """
    Confusion counts over the evaluated antenna-minute grid plus event-wise
    recall (an event is detected with at least ``n`` alarms of level >=
    ``level`` inside its footprint).

    Alarms outside the grid are ignored. Precision is None without alarms,
    minute recall None with an empty mask, event recall None without events.
    """
    cell_index = {c: i for i, c in enumerate(mask.cells)}
    alarmed = np.zeros_like(mask.mask)
    for alarm in alarms:
        offset = alarm.minute - mask.start
        i = cell_index.get(alarm.cell_id)
        if alarm.level >= level and i is not None and 0 <= offset < mask.n_minutes:
            alarmed[i, offset] = True

    tp = int(np.count_nonzero(alarmed & mask.mask))
    fp = int(np.count_nonzero(alarmed & ~mask.mask))
    fn = mask.size - tp
    tn = mask.total - tp - fp - fn

    if rate is None:
        rate = 1.0 / SENSITIVITIES[sensitivity] if sensitivity else 0.0
    ns_precision, ns_recall = noskill_baselines(mask.size, max(mask.total, 1), rate)

    per_event = []
    detected = 0
    counted = 0
    undetectable = set(mask.undetectable)
    for fp_ in mask.footprints:
        hits = np.zeros(0, dtype=np.int64)
        if not fp_.empty:
            sub = alarmed[fp_.cell_indices]
            cols = np.unique(np.concatenate([np.arange(lo, hi) for lo, hi in fp_.intervals]))
            _, hit_cols = np.nonzero(sub[:, cols])
            hits = cols[hit_cols]
        n_hits = int(hits.size)
        found = n_hits >= n
        first = int(hits.min()) + mask.start if n_hits else None
        skip = exclude_undetectable and fp_.event_id in undetectable
        if not skip:
            counted += 1
            detected += int(found)
        per_event.append({
            'id': fp_.event_id,
            'antennas': int(fp_.cell_indices.size),
            'alarms': n_hits,
            'detected': bool(found),
            'first_alarm': format_minute(first) if first is not None else None,
            'latency_min': first - fp_.start if first is not None else None,
            'counted': not skip,
        })

    return EvaluationReport(
        tp=tp, fp=fp, fn=fn, tn=tn,
        precision=_ratio(tp, tp + fp),
        recall_minute=_ratio(tp, tp + fn),
        recall_event=_ratio(detected, counted),
        events_total=counted,
        events_detected=detected,
        noskill_precision=ns_precision,
        noskill_recall=ns_recall,
        min_level=level,
        min_alarms=n,
        sensitivity=sensitivity,
        events=tuple(per_event),
        undetectable=mask.undetectable,
        out_of_span=mask.out_of_span,
        fingerprint=fingerprint,
    )


def pool_reports(reports: Sequence[EvaluationReport]) -> EvaluationReport:
    """
    Pool the reports of disjoint test spans (the folds of one run) at one
    sensitivity. Confusion counts and event tallies add up and every ratio
    is recomputed from the sums. An event is out of span only when it misses
    every fold.

    Raises:
        ValueError: no reports, or reports of different sensitivities or levels
    """
    if not reports:
        raise ValueError("no reports to pool")
    first = reports[0]
    if any((r.sensitivity, r.min_level, r.min_alarms)
           != (first.sensitivity, first.min_level, first.min_alarms) for r in reports):
        raise ValueError("pooled reports must share sensitivity, level and alarm count")

    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    tn = sum(r.tn for r in reports)
    total = sum(r.events_total for r in reports)
    detected = sum(r.events_detected for r in reports)
    ns_precision, ns_recall = noskill_baselines(
        tp + fn, max(tp + fp + fn + tn, 1), first.noskill_recall
    )
    out_of_span = set(first.out_of_span)
    for r in reports[1:]:
        out_of_span &= set(r.out_of_span)

    return EvaluationReport(
        tp=tp, fp=fp, fn=fn, tn=tn,
        precision=_ratio(tp, tp + fp),
        recall_minute=_ratio(tp, tp + fn),
        recall_event=_ratio(detected, total),
        events_total=total,
        events_detected=detected,
        noskill_precision=ns_precision,
        noskill_recall=ns_recall,
        min_level=first.min_level,
        min_alarms=first.min_alarms,
        sensitivity=first.sensitivity,
        events=tuple(e for r in reports for e in r.events),
        undetectable=tuple(sorted({e for r in reports for e in r.undetectable})),
        out_of_span=tuple(sorted(out_of_span)),
    )


@dataclass(frozen=True)
class PRPoint:
    sensitivity: str
    precision: Optional[float]
    recall_minute: Optional[float]
    recall_event: Optional[float]


def pr_curve(reports: Mapping[str, EvaluationReport], allow_partial: bool = False) -> List[PRPoint]:
    """
    One point per sensitivity, most sensitive first.

    Raises:
        IncompleteCurveError: a sensitivity is missing and ``allow_partial`` is unset
    """
    missing = [s for s in SENSITIVITIES if s not in reports]
    if missing:
        if not allow_partial:
            raise IncompleteCurveError(
                f"PR curve needs all sensitivities, missing {missing}", {'missing': missing}
            )
        logger.warning("Emitting partial PR curve", extra={'missing': missing})
    return [
        PRPoint(s, reports[s].precision, reports[s].recall_minute, reports[s].recall_event)
        for s in SENSITIVITIES if s in reports
    ]


def pr_curve_frame(points: Sequence[PRPoint]) -> pd.DataFrame:
    return pd.DataFrame(
        [(p.sensitivity, p.precision, p.recall_minute, p.recall_event) for p in points],
        columns=['sensitivity', 'precision', 'recall_minute', 'recall_event'],
    )


def export_alarm_map(alarms: Iterable[DetectedAnomaly], registry: CellRegistry,
                     min_level: int = 1) -> Dict[str, Any]:
    """GeoJSON FeatureCollection with one Point per alarm at level >= ``min_level``."""
    features = []
    for alarm in sorted(alarms):
        if alarm.level < min_level:
            continue
        cell = registry[alarm.cell_id]
        features.append({
            'type': 'Feature',
            'geometry': {'type': 'Point', 'coordinates': [cell.lon, cell.lat]},
            'properties': {
                'cell_id': alarm.cell_id,
                'minute': format_minute(alarm.minute),
                'level': alarm.level,
                'score': alarm.score,
                'services': join_services(alarm.services),
            },
        })
    return {'type': 'FeatureCollection', 'features': features}
