"""
Synthetic benchmark.

Generates nominal weekly traffic for a grid of antennas and injects
anomalous events with known ground truth. Every random draw comes from a
substream derived from the master seed and the (cell, service) indices, so
the output does not depend on thread scheduling.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from models.activity import (
    DEFAULT_SERVICES,
    MINUTES_PER_DAY,
    MINUTES_PER_WEEK,
    ActivityCube,
    Cell,
    CellRegistry,
    minute_of_week,
    parse_minute,
    week_index,
)
from models.errors import ConfigError
from services.evaluation_service import UncommonEvent
from utils.geo import grid_points, haversine_m, offset_latlon
from utils.logger import log_execution_time, setup_logger
from utils.workers import map_ordered

logger = setup_logger(__name__)

DEFAULT_START = '2019-03-04T00:00Z'  # a Monday
SHAPES = ('jump_decay', 'gradual_ramp')
NOISE_FAMILIES = ('negbin', 'poisson')

# substream tags
_CELL_STREAM, _JITTER_STREAM, _COUNT_STREAM, _EVENT_STREAM = 0, 1, 2, 3

_DEFAULT_SERVICE_SCALE = {'call3g': 0.6, 'call4g': 1.0, 'sms3g': 0.4, 'sms4g': 0.8}


@dataclass(frozen=True)
class TrafficProfile:
    """
    λ(m) = base_rate · cell scale · service scale · daily shape(m) · weekend
    factor, times a per-week multiplicative jitter.
    """

    base_rate: float = 10.0
    service_scale: Mapping[str, float] = field(default_factory=lambda: dict(_DEFAULT_SERVICE_SCALE))
    cell_scale_sd: float = 0.3
    daily_amplitude: float = 0.8
    peak_hour: float = 14.0
    weekend_factor: float = 0.7
    week_jitter: float = 0.05
    noise: str = 'negbin'
    dispersion: float = 1.5

    def __post_init__(self):
        if self.base_rate < 0:
            raise ConfigError("base_rate must be >= 0")
        if not 0 <= self.daily_amplitude <= 1:
            raise ConfigError("daily_amplitude must lie in [0, 1]")
        if self.weekend_factor < 0 or self.week_jitter < 0 or self.cell_scale_sd < 0:
            raise ConfigError("profile factors must be non-negative")
        if self.noise not in NOISE_FAMILIES:
            raise ConfigError(f"noise must be one of {NOISE_FAMILIES}")
        if self.noise == 'negbin' and self.dispersion <= 0:
            raise ConfigError("negative-binomial dispersion must be positive")

    @classmethod
    def flat(cls, rate: float, noise: str = 'poisson') -> 'TrafficProfile':
        """Constant intensity with no cell, service, daily or weekly variation."""
        return cls(
            base_rate=rate, service_scale={}, cell_scale_sd=0.0, daily_amplitude=0.0,
            weekend_factor=1.0, week_jitter=0.0, noise=noise,
        )

    def shape(self, minutes: np.ndarray) -> np.ndarray:
        m = minute_of_week(minutes)
        minute_of_day = m % MINUTES_PER_DAY
        daily = 1.0 + self.daily_amplitude * np.cos(
            2.0 * np.pi * (minute_of_day - self.peak_hour * 60.0) / MINUTES_PER_DAY
        )
        weekend = np.where(m >= 5 * MINUTES_PER_DAY, self.weekend_factor, 1.0)
        return daily * weekend


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


class SyntheticTraffic:
    """Nominal traffic model of a set of cells and services over a span."""

    def __init__(self, profile: TrafficProfile, cells: Sequence[str], services: Sequence[str],
                 start: int, n_minutes: int, seed: int):
        self.profile = profile
        self.cells = tuple(cells)
        self.services = tuple(services)
        self.start = start
        self.n_minutes = n_minutes
        self.seed = seed
        self.minutes = np.arange(start, start + n_minutes, dtype=np.int64)
        self._shape = profile.shape(self.minutes)
        weeks = week_index(self.minutes)
        self._weeks = weeks - weeks[0] if n_minutes else weeks
        self._cell_scale = np.array([
            math.exp(_rng(seed, _CELL_STREAM, i).normal(0.0, profile.cell_scale_sd))
            if profile.cell_scale_sd > 0 else 1.0
            for i in range(len(self.cells))
        ])

    def intensity(self, i: int, j: int) -> np.ndarray:
        """Expected count per minute of pair (cells[i], services[j])."""
        p = self.profile
        scale = p.base_rate * self._cell_scale[i] * p.service_scale.get(self.services[j], 1.0)
        n_weeks = int(self._weeks[-1]) + 1 if self.n_minutes else 0
        if p.week_jitter > 0:
            jitter = np.exp(_rng(self.seed, _JITTER_STREAM, i, j).normal(0.0, p.week_jitter, n_weeks))
        else:
            jitter = np.ones(n_weeks)
        return scale * self._shape * jitter[self._weeks]

    def sample(self, i: int, j: int) -> np.ndarray:
        lam = self.intensity(i, j)
        rng = _rng(self.seed, _COUNT_STREAM, i, j)
        if self.profile.noise == 'poisson':
            return rng.poisson(lam).astype(float)
        k = self.profile.dispersion
        return rng.negative_binomial(k, k / (k + lam)).astype(float)

    def generate(self, threads: Optional[int] = None) -> ActivityCube:
        pairs = [(i, j) for i in range(len(self.cells)) for j in range(len(self.services))]
        rows = map_ordered(lambda ij: self.sample(*ij), pairs, threads)
        counts = np.stack(rows).reshape(len(self.cells), len(self.services), self.n_minutes) \
            if rows else np.zeros((len(self.cells), len(self.services), self.n_minutes))
        return ActivityCube(self.cells, self.services, self.start, counts)


@log_execution_time
def gen_nominal(profile: TrafficProfile, cells: Sequence[str], services: Sequence[str],
                weeks: float, seed: int, start: Optional[int] = None,
                threads: Optional[int] = None) -> ActivityCube:
    """Nominal activity cube of ``weeks`` weeks starting at ``start`` (default a Monday)."""
    start = parse_minute(DEFAULT_START) if start is None else start
    n_minutes = int(round(weeks * MINUTES_PER_WEEK))
    return SyntheticTraffic(profile, cells, services, start, n_minutes, seed).generate(threads)


@dataclass(frozen=True)
class EventSpec:
    """
    One injected event. ``magnitude`` is in multiples of the local nominal
    intensity at the epicenter; it decays in space as exp(-d / rho_m).
    """

    event_id: str
    shape: str
    magnitude: float
    lat: float
    lon: float
    onset: int
    duration: int
    rho_m: float = 500.0
    time_constant_min: float = 30.0
    peak_fraction: float = 0.5
    service_weights: Mapping[str, float] = field(default_factory=dict)
    radius_m: Optional[float] = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"event {self.event_id}: shape must be one of {SHAPES}")
        if self.magnitude < 0:
            raise ConfigError(f"event {self.event_id}: magnitude must be >= 0")
        if self.duration < 1:
            raise ConfigError(f"event {self.event_id}: duration must be >= 1 minute")
        if self.rho_m <= 0 or self.time_constant_min <= 0:
            raise ConfigError(f"event {self.event_id}: rho_m and time_constant_min must be positive")
        if not 0 <= self.peak_fraction <= 1:
            raise ConfigError(f"event {self.event_id}: peak_fraction must lie in [0, 1]")

    @property
    def end(self) -> int:
        return self.onset + self.duration

    @property
    def peak_minute(self) -> int:
        if self.shape == 'jump_decay':
            return self.onset
        return self.onset + int(round(self.peak_fraction * (self.duration - 1)))

    def temporal_kernel(self, minutes: np.ndarray) -> np.ndarray:
        """Relative intensity in [0, 1] over ``minutes``; zero outside [onset, end)."""
        t = np.asarray(minutes, dtype=float)
        active = (t >= self.onset) & (t < self.end)
        out = np.zeros(t.shape)
        if self.shape == 'jump_decay':
            out[active] = np.exp(-(t[active] - self.onset) / self.time_constant_min)
            return out
        peak = float(self.peak_minute)
        last = float(self.end - 1)
        rising = active & (t <= peak)
        falling = active & (t > peak)
        out[rising] = 1.0 if peak == self.onset else (t[rising] - self.onset + 1) / (peak - self.onset + 1)
        out[falling] = (last - t[falling] + 1) / (last - peak + 1)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'EventSpec':
        data = dict(data)
        try:
            data['onset'] = parse_minute(str(data['onset']))
            data['event_id'] = str(data.pop('id', data.get('event_id')))
            return cls(**data)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid event spec {data.get('event_id')}: {e}") from e


def injected_intensity(spec: EventSpec, traffic: SyntheticTraffic, registry: CellRegistry
                       ) -> np.ndarray:
    """
    Expected extra counts of one event over the traffic grid, shape
    (cells, services, minutes).
    """
    lats, lons = registry.coordinates(traffic.cells)
    spatial = np.exp(-haversine_m(spec.lat, spec.lon, lats, lons) / spec.rho_m)
    temporal = spec.temporal_kernel(traffic.minutes)
    out = np.zeros((len(traffic.cells), len(traffic.services), traffic.n_minutes))
    if spec.magnitude == 0:
        return out
    active = np.flatnonzero(temporal)
    for j, service in enumerate(traffic.services):
        weight = spec.service_weights.get(service, 1.0) if spec.service_weights else 1.0
        if weight == 0:
            continue
        for i in range(len(traffic.cells)):
            lam = traffic.intensity(i, j)[active]
            out[i, j, active] = spec.magnitude * weight * spatial[i] * lam * temporal[active]
    return out


def injection_component(specs: Sequence[EventSpec], traffic: SyntheticTraffic,
                        registry: CellRegistry) -> np.ndarray:
    """Integer counts added by the events (rounded expected extra)."""
    total = np.zeros((len(traffic.cells), len(traffic.services), traffic.n_minutes))
    for spec in specs:
        total += injected_intensity(spec, traffic, registry)
    return np.rint(total)


def _ground_truth_radius(spec: EventSpec, registry: CellRegistry, cells: Sequence[str]) -> float:
    if spec.radius_m is not None:
        return spec.radius_m
    lats, lons = registry.coordinates(cells)
    nearest = float(np.min(haversine_m(spec.lat, spec.lon, lats, lons)))
    return max(spec.rho_m, nearest)


@log_execution_time
def inject_events(
    cube: ActivityCube,
    specs: Sequence[EventSpec],
    registry: CellRegistry,
    traffic: SyntheticTraffic,
) -> Tuple[ActivityCube, List[UncommonEvent]]:
    """
    Add the events to a nominal cube and emit their DBUE records.

    The ground-truth radius of a record is the event's ``radius_m`` when set,
    otherwise the larger of ``rho_m`` and the distance to the nearest antenna,
    so the peak antenna-minute always lies inside the record's footprint.
    """
    lats, lons = registry.coordinates(cube.cells)
    events = []
    for spec in specs:
        if spec.onset < cube.start or spec.end > cube.end:
            raise ConfigError(
                f"event {spec.event_id} window [{spec.onset}, {spec.end}) outside cube span"
            )
        nearest = float(np.min(haversine_m(spec.lat, spec.lon, lats, lons)))
        if nearest > 3 * spec.rho_m:
            logger.warning("Event epicenter has no antenna within 3 rho", extra={
                'event_id': spec.event_id, 'nearest_m': round(nearest, 1),
            })
        events.append(UncommonEvent(
            event_id=spec.event_id,
            epicenters=((spec.lat, spec.lon),),
            start=spec.onset,
            end=spec.end,
            radius_m=_ground_truth_radius(spec, registry, cube.cells),
            label=spec.shape,
            description=f"synthetic {spec.shape} event, magnitude {spec.magnitude:g}",
        ))

    component = injection_component(specs, traffic, registry)
    counts = np.where(np.isnan(cube.counts), np.nan, cube.counts + component)
    logger.info("Events injected", extra={
        'events': len(events), 'injected_total': float(component.sum()),
    })
    return ActivityCube(cube.cells, cube.services, cube.start, counts), events


def random_event_specs(
    n: int,
    registry: CellRegistry,
    window: Tuple[int, int],
    seed: int,
    magnitude_range: Tuple[float, float] = (5.0, 15.0),
    rho_m: float = 500.0,
    jitter_m: float = 100.0,
) -> List[EventSpec]:
    """
    ``n`` events alternating between jump-decay and gradual-ramp shapes,
    one per equal slot of ``window`` so they never overlap in time, each
    centred near a random antenna.
    """
    if n <= 0:
        return []
    lo, hi = window
    slot = (hi - lo) // n
    max_duration = 360
    if slot < max_duration + 60:
        raise ConfigError(f"window too short for {n} non-overlapping events")
    rng = _rng(seed, _EVENT_STREAM)
    cells = list(registry)
    specs = []
    for k in range(n):
        shape = SHAPES[k % 2]
        duration = int(rng.integers(60, 181)) if shape == 'jump_decay' else int(rng.integers(120, 361))
        onset = lo + k * slot + int(rng.integers(0, slot - duration))
        anchor = registry[cells[int(rng.integers(0, len(cells)))]]
        bearing = rng.uniform(0.0, 2.0 * np.pi)
        dist = rng.uniform(0.0, jitter_m)
        lat, lon = offset_latlon(anchor.lat, anchor.lon, dist * np.cos(bearing), dist * np.sin(bearing))
        specs.append(EventSpec(
            event_id=f"E{k:03d}",
            shape=shape,
            magnitude=float(rng.uniform(*magnitude_range)),
            lat=float(lat),
            lon=float(lon),
            onset=onset,
            duration=duration,
            rho_m=rho_m,
        ))
    return specs


def grid_registry(center_lat: float, center_lon: float, rows: int, cols: int,
                  spacing_m: float) -> CellRegistry:
    points = grid_points(center_lat, center_lon, rows, cols, spacing_m)
    return CellRegistry(Cell(f"A{k:03d}", float(lat), float(lon)) for k, (lat, lon) in enumerate(points))


@dataclass(frozen=True)
class Scenario:
    """
    Scenario file: antenna grid, traffic profile, span and events (explicit
    or drawn at random).
    """

    seed: int = 0
    start: int = field(default_factory=lambda: parse_minute(DEFAULT_START))
    weeks: float = 5.0
    services: Tuple[str, ...] = DEFAULT_SERVICES
    center: Tuple[float, float] = (48.8566, 2.3522)
    rows: int = 2
    cols: int = 5
    spacing_m: float = 400.0
    profile: TrafficProfile = field(default_factory=TrafficProfile)
    events: Tuple[EventSpec, ...] = ()
    random_events: Optional[Mapping[str, Any]] = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Scenario':
        known = {'seed', 'start', 'weeks', 'services', 'grid', 'profile', 'events',
                 'random_events'}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {unknown}")
        grid = dict(data.get('grid') or {})
        center = grid.get('center') or {'lat': 48.8566, 'lon': 2.3522}
        try:
            profile = TrafficProfile(**(data.get('profile') or {}))
            return cls(
                seed=int(data.get('seed', 0)),
                start=parse_minute(str(data.get('start', DEFAULT_START))),
                weeks=float(data.get('weeks', 5.0)),
                services=tuple(data.get('services', DEFAULT_SERVICES)),
                center=(float(center['lat']), float(center['lon'])),
                rows=int(grid.get('rows', 2)),
                cols=int(grid.get('cols', 5)),
                spacing_m=float(grid.get('spacing_m', 400.0)),
                profile=profile,
                events=tuple(EventSpec.from_dict(e) for e in data.get('events') or ()),
                random_events=data.get('random_events'),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid scenario: {e}") from e

    @classmethod
    def load(cls, path: str) -> 'Scenario':
        try:
            with open(path, encoding='utf-8') as handle:
                return cls.from_dict(json.load(handle))
        except FileNotFoundError as e:
            raise ConfigError(f"scenario file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"scenario file is not valid JSON: {path}: {e}") from e

    @property
    def n_minutes(self) -> int:
        return int(round(self.weeks * MINUTES_PER_WEEK))

    def registry(self) -> CellRegistry:
        return grid_registry(self.center[0], self.center[1], self.rows, self.cols, self.spacing_m)

    def event_specs(self, registry: CellRegistry) -> List[EventSpec]:
        specs = list(self.events)
        if self.random_events:
            opts = dict(self.random_events)
            lo = parse_minute(str(opts['window_start'])) if 'window_start' in opts else self.start
            hi = parse_minute(str(opts['window_end'])) if 'window_end' in opts \
                else self.start + self.n_minutes
            specs.extend(random_event_specs(
                int(opts.get('count', 10)), registry, (lo, hi), self.seed,
                magnitude_range=(float(opts.get('magnitude_min', 5.0)),
                                 float(opts.get('magnitude_max', 15.0))),
                rho_m=float(opts.get('rho_m', 500.0)),
            ))
        return specs


@dataclass(frozen=True)
class SynthResult:
    cube: ActivityCube
    nominal: ActivityCube
    registry: CellRegistry
    events: Tuple[UncommonEvent, ...]
    specs: Tuple[EventSpec, ...]


def run_scenario(scenario: Scenario, threads: Optional[int] = None) -> SynthResult:
    registry = scenario.registry()
    cells = tuple(registry)
    traffic = SyntheticTraffic(
        scenario.profile, cells, scenario.services, scenario.start, scenario.n_minutes, scenario.seed
    )
    nominal = traffic.generate(threads)
    specs = scenario.event_specs(registry)
    cube, events = inject_events(nominal, specs, registry, traffic)
    return SynthResult(cube, nominal, registry, tuple(events), tuple(specs))
