"""
Run configuration.

A RunConfig is read from the JSON file passed with ``--config`` and
overridden by CLI flags. Its fingerprint identifies every artifact a run
produces; per-invocation knobs (sensitivity, input and output locations, force
flags) are left out of it so one trained run can be evaluated at every
sensitivity and the same run reproduces byte for byte in another directory.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

from models.activity import DEFAULT_SERVICES, FoldSpec
from models.errors import ConfigError

METHODS = ('signature', 'adaptive')

# expected minutes between two exceedances, most sensitive first
SENSITIVITIES: Dict[str, int] = {
    '4h': 4 * 60,
    '8h': 8 * 60,
    '12h': 12 * 60,
    '1d': 24 * 60,
    '2d': 2 * 24 * 60,
    '1w': 7 * 24 * 60,
}

_UNFINGERPRINTED = ('sensitivity', 'out_dir', 'paths', 'force', 'allow_partial')


@dataclass(frozen=True)
class SignatureParams:
    h: float = 2.32
    butter_order: int = 4
    butter_cutoff_per_min: float = 1.0 / 120.0
    min_weeks: float = 3.0
    min_samples: int = 10080
    min_exceedances: int = 30
    mle_max_steps: int = 50


@dataclass(frozen=True)
class AdaptiveParams:
    tau_min: float = 1440.0
    h: float = 3.0
    fourier_order: int = 10
    knots_per_month: float = 4.0
    ridge: float = 1e-3
    sigma_floor_min: float = 0.5
    sigma_floor_rel: float = 1e-3
    warmup_days: int = 7
    min_weeks: float = 2.0
    tail_h: float = 2.32
    min_samples: int = 10080
    min_exceedances: int = 30


@dataclass(frozen=True)
class EvaluationParams:
    default_radius_m: float = 300.0
    event_min_alarms: int = 1
    exclude_undetectable: bool = False


@dataclass(frozen=True)
class RunPaths:
    activity: Optional[str] = None
    cells: Optional[str] = None
    dbue: Optional[str] = None
    scenario: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    method: str = 'signature'
    services: Tuple[str, ...] = DEFAULT_SERVICES
    folds: FoldSpec = field(default_factory=FoldSpec)
    fold_index: int = 0
    signature: SignatureParams = field(default_factory=SignatureParams)
    adaptive: AdaptiveParams = field(default_factory=AdaptiveParams)
    min_mean_rate: float = 0.1
    holidays: Tuple[str, ...] = ()
    evaluation: EvaluationParams = field(default_factory=EvaluationParams)
    sensitivity: str = '4h'
    paths: RunPaths = field(default_factory=RunPaths)
    seed: int = 0
    out_dir: str = 'out'
    force: bool = False
    allow_partial: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}', expected one of {METHODS}")
        if not self.services:
            raise ConfigError("at least one service is required")
        if len(set(self.services)) != len(self.services):
            raise ConfigError(f"duplicate services in {self.services}")
        if self.sensitivity not in SENSITIVITIES:
            raise ConfigError(
                f"unknown sensitivity '{self.sensitivity}', expected one of {tuple(SENSITIVITIES)}"
            )
        if not 0 <= self.fold_index < self.folds.n_folds:
            raise ConfigError(
                f"fold_index {self.fold_index} outside [0, {self.folds.n_folds})"
            )
        if self.min_mean_rate < 0:
            raise ConfigError("min_mean_rate must be >= 0")
        if self.signature.h <= 0 or self.adaptive.h <= 0:
            raise ConfigError("alarm multipliers h must be positive")
        if self.adaptive.tau_min <= 0:
            raise ConfigError("half-life tau_min must be positive")
        if not 0 < self.signature.butter_cutoff_per_min < 0.5:
            raise ConfigError("Butterworth cutoff must lie in (0, 0.5) cycles per minute")
        if self.evaluation.default_radius_m <= 0:
            raise ConfigError("default_radius_m must be positive")
        if self.evaluation.event_min_alarms < 1:
            raise ConfigError("event_min_alarms must be >= 1")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[str] = None) -> 'RunConfig':
        """
        Build a config from its JSON form.

        Args:
            data: Parsed JSON object
            base_dir: Directory relative paths are resolved against

        Raises:
            ConfigError: unknown keys or invalid values
        """
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        _reject_unknown(cls, data, 'config')
        kwargs: Dict[str, Any] = dict(data)
        try:
            if 'services' in kwargs:
                kwargs['services'] = _as_services(kwargs['services'])
            if 'holidays' in kwargs:
                kwargs['holidays'] = tuple(str(d) for d in kwargs['holidays'])
            if 'folds' in kwargs:
                folds = kwargs['folds'] or {}
                _reject_unknown(FoldSpec, folds, 'folds')
                kwargs['folds'] = FoldSpec(
                    n_folds=int(folds.get('n_folds', 3)),
                    test_days=folds.get('test_days'),
                )
            for key, block in (('signature', SignatureParams), ('adaptive', AdaptiveParams),
                               ('evaluation', EvaluationParams)):
                if key in kwargs:
                    _reject_unknown(block, kwargs[key], key)
                    kwargs[key] = block(**kwargs[key])
            if 'paths' in kwargs:
                _reject_unknown(RunPaths, kwargs['paths'], 'paths')
                kwargs['paths'] = RunPaths(**{
                    k: _resolve(v, base_dir) for k, v in kwargs['paths'].items()
                })
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid config: {e}") from e

    @classmethod
    def load(cls, path: str) -> 'RunConfig':
        try:
            with open(path, encoding='utf-8') as handle:
                data = json.load(handle)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {path}: {e}") from e
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))

    def with_overrides(self, **overrides: Any) -> 'RunConfig':
        """Apply CLI overrides, ignoring the ones left unset (None)."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        if 'services' in changes:
            changes['services'] = _as_services(changes['services'])
        try:
            return replace(self, **changes)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid override: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['services'] = list(self.services)
        data['holidays'] = list(self.holidays)
        data['folds'] = self.folds.to_dict()
        return data

    def fingerprint_payload(self) -> Dict[str, Any]:
        """The config as embedded in artifacts: every field that affects their content."""
        return {k: v for k, v in self.to_dict().items() if k not in _UNFINGERPRINTED}

    def fingerprint(self) -> str:
        canonical = json.dumps(self.fingerprint_payload(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def resolve_path(self, name: str) -> str:
        """Input path for ``activity``, ``cells`` or ``dbue``, defaulting into out_dir."""
        defaults = {'activity': 'activity.csv', 'cells': 'cells.csv', 'dbue': 'dbue.json'}
        value = getattr(self.paths, name)
        if value:
            return value
        if name not in defaults:
            raise ConfigError(f"paths.{name} must be set")
        return os.path.join(self.out_dir, defaults[name])


def _as_services(value: Any) -> Tuple[str, ...]:
    if isinstance(value, str):
        value = [v for v in value.split(',')]
    services = tuple(str(v).strip() for v in value if str(v).strip())
    if not services:
        raise ConfigError("service list is empty")
    return services


def _resolve(value: Optional[str], base_dir: Optional[str]) -> Optional[str]:
    if value is None or base_dir is None or os.path.isabs(value):
        return value
    return os.path.normpath(os.path.join(base_dir, value))


def _reject_unknown(cls: type, data: Dict[str, Any], where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"'{where}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
