"""
Activity ingestion and slicing.

Reads the activity and cell-registry CSV files into immutable ActivityCube /
CellRegistry objects, writes them back in canonical form, cuts train/test
folds and selects the (cell, service) pairs active enough to model.
"""

from typing import Dict, List, Optional, Set, Tuple

import numpy as np
import pandas as pd

from models.activity import (
    MINUTES_PER_DAY,
    ActivityCube,
    Cell,
    CellRegistry,
    FoldSpec,
    Pair,
    parse_minute,
)
from models.errors import (
    ActivityParseError,
    ActivityValidationError,
    EmptyCubeError,
    FoldSpecError,
)
from utils.artifacts import write_csv
from utils.logger import log_execution_time, setup_logger

logger = setup_logger(__name__)

ACTIVITY_COLUMNS = ('minute', 'cell_id', 'service', 'count')
REGISTRY_COLUMNS = ('cell_id', 'lat', 'lon')

# data rows start on line 2, after the header
_FIRST_DATA_LINE = 2


@log_execution_time
def load_activity_csv(
    path: str,
    schema: Optional[Dict[str, str]] = None,
    span: Optional[Tuple[int, int]] = None,
) -> ActivityCube:
    """
    Load an activity CSV into a dense cube.

    Args:
        path: CSV file with a header row
        schema: Maps the canonical names (minute, cell_id, service, count) to
            the file's column names; identity when omitted
        span: Declared [start, end) minutes; defaults to the observed extent

    Returns:
        ActivityCube with duplicate (cell, service, minute) rows summed

    Raises:
        ActivityParseError: missing column, unparseable minute or count
        ActivityValidationError: negative or fractional count, minute outside span
        EmptyCubeError: no data rows
    """
    mapping = {name: name for name in ACTIVITY_COLUMNS}
    mapping.update(schema or {})

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise EmptyCubeError(f"activity file is empty: {path}") from e
    except pd.errors.ParserError as e:
        raise ActivityParseError(f"malformed activity file {path}: {e}") from e

    missing = [mapping[c] for c in ACTIVITY_COLUMNS if mapping[c] not in frame.columns]
    if missing:
        raise ActivityParseError(f"activity file {path} lacks columns {missing}", line=1)
    if frame.empty:
        raise EmptyCubeError(f"activity file has no data rows: {path}")

    minutes = _parse_minutes(frame[mapping['minute']])
    counts = _parse_counts(frame[mapping['count']])
    cell_col = frame[mapping['cell_id']].str.strip()
    service_col = frame[mapping['service']].str.strip()
    for label, column in (('cell_id', cell_col), ('service', service_col)):
        blank = np.flatnonzero((column == '').to_numpy())
        if blank.size:
            raise ActivityParseError(f"empty {label}", line=int(blank[0]) + _FIRST_DATA_LINE)

    start, end = span if span is not None else (int(minutes.min()), int(minutes.max()) + 1)
    outside = np.flatnonzero((minutes < start) | (minutes >= end))
    if outside.size:
        raise ActivityValidationError(
            f"minute outside declared span [{start}, {end})",
            line=int(outside[0]) + _FIRST_DATA_LINE,
        )

    cell_codes, cells = pd.factorize(cell_col, sort=True)
    service_codes, services = pd.factorize(service_col, sort=True)
    n_minutes = end - start
    shape = (len(cells), len(services), n_minutes)
    flat = (cell_codes.astype(np.int64) * shape[1] + service_codes) * n_minutes + (minutes - start)

    size = shape[0] * shape[1] * shape[2]
    totals = np.bincount(flat, weights=counts, minlength=size)
    seen = np.bincount(flat, minlength=size) > 0
    cube_counts = np.where(seen, totals, np.nan).reshape(shape)

    cube = ActivityCube(tuple(cells), tuple(services), start, cube_counts)
    logger.info("Activity loaded", extra={
        'path': path,
        'rows': int(len(frame)),
        'cells': len(cells),
        'services': list(services),
        'span_start': start,
        'span_minutes': n_minutes,
    })
    return cube


def write_activity_csv(cube: ActivityCube, path: str) -> str:
    """
    Write every observed (cell, service, minute) in canonical order: minute,
    then cell id, then service. Absent minutes are not written.
    """
    cell_idx, service_idx, offset = np.nonzero(~np.isnan(cube.counts))
    values = cube.counts[cell_idx, service_idx, offset]
    minutes = cube.start + offset.astype(np.int64)
    frame = pd.DataFrame({
        'minute': minutes,
        'cell_id': np.asarray(cube.cells, dtype=object)[cell_idx],
        'service': np.asarray(cube.services, dtype=object)[service_idx],
        'count': values.astype(np.int64),
    })
    frame = frame.sort_values(['minute', 'cell_id', 'service'], kind='mergesort')
    frame['minute'] = format_minutes(frame['minute'].to_numpy())
    return write_csv(path, frame[list(ACTIVITY_COLUMNS)])


def load_cell_registry(path: str) -> CellRegistry:
    """
    Raises:
        ActivityParseError: missing column, bad coordinate, duplicate id
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise ActivityParseError(f"cell registry is empty: {path}") from e

    missing = [c for c in REGISTRY_COLUMNS if c not in frame.columns]
    if missing:
        raise ActivityParseError(f"cell registry {path} lacks columns {missing}", line=1)

    cells = []
    for i, row in enumerate(frame.itertuples(index=False)):
        line = i + _FIRST_DATA_LINE
        try:
            cells.append(Cell(row.cell_id.strip(), float(row.lat), float(row.lon)))
        except ValueError as e:
            raise ActivityParseError(f"invalid registry row: {e}", line=line) from e
    return CellRegistry(cells)


def write_cell_registry(registry: CellRegistry, path: str) -> str:
    frame = pd.DataFrame(
        [(c, registry[c].lat, registry[c].lon) for c in registry],
        columns=list(REGISTRY_COLUMNS),
    )
    return write_csv(path, frame)


def slice_folds(cube: ActivityCube, spec: FoldSpec) -> List[Tuple[ActivityCube, ActivityCube]]:
    """
    Cut the cube into (train, test) pairs, one per fold.

    The test cube is the fold's interval; the train cube keeps the full span
    with the test interval made absent, so both share minute indexing with
    the source.

    Raises:
        FoldSpecError: intervals overlap, leave gaps, exceed the span, or
            leave a fold without training minutes
    """
    intervals = fold_intervals(cube, spec)
    logger.debug("Folds sliced", extra={'intervals': [list(i) for i in intervals]})
    return [_split(cube, lo, hi) for lo, hi in intervals]


def slice_fold(cube: ActivityCube, spec: FoldSpec, index: int) -> Tuple[ActivityCube, ActivityCube]:
    """The (train, test) pair of one fold, without materialising the others."""
    intervals = fold_intervals(cube, spec)
    if not 0 <= index < len(intervals):
        raise FoldSpecError(f"fold index {index} outside [0, {len(intervals)})")
    return _split(cube, *intervals[index])


def _split(cube: ActivityCube, lo: int, hi: int) -> Tuple[ActivityCube, ActivityCube]:
    if lo == cube.start and hi == cube.end:
        raise FoldSpecError("a fold covering the whole span leaves no training data")
    return cube.mask(lo, hi), cube.restrict(lo, hi)


def fold_intervals(cube: ActivityCube, spec: FoldSpec) -> Tuple[Tuple[int, int], ...]:
    return _validated_intervals(spec.intervals(cube.start, cube.end), cube)


def filter_active_pairs(train: ActivityCube, min_mean_rate: float) -> Set[Pair]:
    """
    Pairs whose mean count over observed training minutes is at least
    ``min_mean_rate`` events/minute. A pair with no observed minute has
    mean 0.
    """
    if min_mean_rate < 0:
        raise ValueError("min_mean_rate must be >= 0")
    observed = np.count_nonzero(~np.isnan(train.counts), axis=2)
    totals = np.nansum(train.counts, axis=2)
    means = totals / np.maximum(observed, 1)
    active = set()
    for i, cell in enumerate(train.cells):
        for j, service in enumerate(train.services):
            if means[i, j] >= min_mean_rate:
                active.add((cell, service))
    logger.info("Active pairs selected", extra={
        'active': len(active),
        'total': len(train.cells) * len(train.services),
        'min_mean_rate': min_mean_rate,
    })
    return active


def _validated_intervals(intervals, cube: ActivityCube) -> Tuple[Tuple[int, int], ...]:
    ordered = sorted(intervals)
    if not ordered:
        raise FoldSpecError("no fold intervals")
    for lo, hi in ordered:
        if lo >= hi:
            raise FoldSpecError(f"empty fold interval [{lo}, {hi})")
        if lo < cube.start or hi > cube.end:
            raise FoldSpecError(
                f"fold interval [{lo}, {hi}) exceeds span [{cube.start}, {cube.end})"
            )
    for (_, prev_hi), (lo, _) in zip(ordered, ordered[1:]):
        if lo < prev_hi:
            raise FoldSpecError(f"fold intervals overlap at minute {lo}")
        if lo > prev_hi:
            raise FoldSpecError(f"fold intervals leave a gap [{prev_hi}, {lo})")
    if ordered[0][0] != cube.start:
        raise FoldSpecError("folds do not start at the beginning of the span")
    last_lo, last_hi = ordered[-1]
    if last_hi < cube.end:
        # a partial trailing day joins the last fold
        if cube.end - last_hi >= MINUTES_PER_DAY:
            raise FoldSpecError(f"folds leave [{last_hi}, {cube.end}) uncovered")
        ordered[-1] = (last_lo, cube.end)
    return tuple(ordered)


def _parse_minutes(column: pd.Series) -> np.ndarray:
    codes, uniques = pd.factorize(column)
    parsed = np.empty(len(uniques), dtype=np.int64)
    for k, text in enumerate(uniques):
        try:
            parsed[k] = parse_minute(text)
        except (ValueError, OverflowError) as e:
            line = int(np.flatnonzero(codes == k)[0]) + _FIRST_DATA_LINE
            raise ActivityParseError(f"unparseable minute '{text}': {e}", line=line) from e
    return parsed[codes]


def _parse_counts(column: pd.Series) -> np.ndarray:
    # typographic minus (U+2212) is a minus
    text = column.str.strip().str.replace('\u2212', '-', regex=False)
    values = pd.to_numeric(text, errors='coerce').to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        line = int(bad[0]) + _FIRST_DATA_LINE
        raise ActivityParseError(f"unparseable count '{column.iloc[bad[0]]}'", line=line)
    negative = np.flatnonzero(values < 0)
    if negative.size:
        line = int(negative[0]) + _FIRST_DATA_LINE
        raise ActivityValidationError(f"negative count {values[negative[0]]:g}", line=line)
    fractional = np.flatnonzero(values != np.floor(values))
    if fractional.size:
        line = int(fractional[0]) + _FIRST_DATA_LINE
        raise ActivityValidationError(f"count {values[fractional[0]]:g} is not an integer", line=line)
    return values


def format_minutes(minutes: np.ndarray) -> np.ndarray:
    stamps = pd.to_datetime(minutes * 60, unit='s', utc=True)
    return stamps.strftime('%Y-%m-%dT%H:%MZ').to_numpy()


def parse_iso_minutes(values) -> np.ndarray:
    """Epoch minutes of canonical ``%Y-%m-%dT%H:%MZ`` strings (vectorized)."""
    stamps = pd.to_datetime(pd.Series(values, dtype=str), format='%Y-%m-%dT%H:%MZ', utc=True)
    return ((stamps - pd.Timestamp(0, tz='UTC')) // pd.Timedelta(minutes=1)).to_numpy(dtype=np.int64)
