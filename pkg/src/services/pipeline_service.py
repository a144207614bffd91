"""
Pipeline stages behind the CLI.

Each stage reads the artifacts of earlier stages from ``out_dir``, writes its
own, and lists them in ``manifests/<stage>.json`` next to the run fingerprint
and config. Stages share nothing in memory, so any of them can be re-run on
its own.
"""

import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models.activity import ActivityCube, Pair
from models.detection import DetectedAnomaly, FusedScores, join_services, split_services
from models.errors import ConfigError, ModelNotFoundError
from models.run_config import SENSITIVITIES, RunConfig, RunPaths
from services.adaptive_service import AdaptiveDetector, AdaptiveModel
from services.evaluation_service import (
    EvaluationReport,
    PRPoint,
    dbue_document,
    expand_ground_truth,
    export_alarm_map,
    load_dbue,
    pool_reports,
    pr_curve,
    pr_curve_frame,
    score_run,
)
from services.level_service import (
    LEVEL_SENSITIVITY,
    LevelThresholds,
    calibrate_thresholds,
    detect_alarms,
    level_rates,
    select_alarms,
)
from services.signature_service import SignatureDetector, SignatureModel
from services.synth_service import Scenario, run_scenario
from services.telemetry_service import (
    filter_active_pairs,
    format_minutes,
    load_activity_csv,
    load_cell_registry,
    parse_iso_minutes,
    slice_fold,
    write_activity_csv,
    write_cell_registry,
)
from utils.artifacts import (
    FORMAT_VERSION,
    StageOutputs,
    check_fingerprint,
    read_csv,
    read_json,
    read_npz,
    write_csv,
    write_json,
    write_npz,
)
from utils.logger import get_logger_with_context, log_execution_time, log_function_call

STAGES = ('synth', 'train', 'calibrate', 'detect', 'evaluate', 'pr-curve', 'export-map')
DRIVERS = ('run-all', 'cross-validate', 'ablation')

# stages of one train/test run once synth has produced its inputs
FIT_STAGES = ('train', 'calibrate', 'detect', 'evaluate', 'pr-curve')

ALARM_COLUMNS = ('minute', 'cell_id', 'level', 'score', 'services')
SCORE_COLUMNS = ('minute', 'cell_id', 'score', 'services')

ABLATION_SUBSETS: Tuple[Tuple[str, ...], ...] = (
    ('call3g',),
    ('call4g',),
    ('sms3g',),
    ('sms4g',),
    ('call3g', 'call4g'),
    ('sms3g', 'sms4g'),
    ('call3g', 'call4g', 'sms3g', 'sms4g'),
)

_MODEL_CLASSES = {'signature': SignatureModel, 'adaptive': AdaptiveModel}


@dataclass(frozen=True)
class StageResult:
    stage: str
    artifacts: List[str]
    summary: Dict[str, Any] = field(default_factory=dict)


def fused_scores_frame(fused: Sequence[FusedScores]) -> pd.DataFrame:
    """Every scored minute as a ``minute,cell_id,score,services`` row, canonical order."""
    parts = []
    for series in fused:
        offsets = np.flatnonzero(series.scored())
        if offsets.size == 0:
            continue
        present = series.present[:, offsets]
        codes = (present.T * (1 << np.arange(len(series.services)))).sum(axis=1)
        labels = {
            int(code): join_services(s for k, s in enumerate(series.services) if code >> k & 1)
            for code in np.unique(codes)
        }
        parts.append(pd.DataFrame({
            'minute': series.start + offsets.astype(np.int64),
            'cell_id': series.cell_id,
            'score': series.log_scores[offsets],
            'services': [labels[int(c)] for c in codes],
        }))
    if not parts:
        return pd.DataFrame(columns=list(SCORE_COLUMNS))
    frame = pd.concat(parts, ignore_index=True)
    frame = frame.sort_values(['minute', 'cell_id'], kind='mergesort')
    frame['minute'] = format_minutes(frame['minute'].to_numpy())
    return frame[list(SCORE_COLUMNS)]


def points_summary(points: Sequence[PRPoint]) -> List[Dict[str, Any]]:
    return [
        {'sensitivity': p.sensitivity, 'precision': p.precision,
         'recall_minute': p.recall_minute, 'recall_event': p.recall_event}
        for p in points
    ]


def alarms_frame(alarms: Sequence[DetectedAnomaly]) -> pd.DataFrame:
    frame = pd.DataFrame([a.to_row() for a in sorted(alarms)], columns=list(ALARM_COLUMNS))
    if not frame.empty:
        frame['minute'] = format_minutes(frame['minute'].to_numpy(dtype=np.int64))
    return frame


def alarms_from_frame(frame: pd.DataFrame) -> List[DetectedAnomaly]:
    if frame.empty:
        return []
    minutes = parse_iso_minutes(frame['minute'])
    return [
        DetectedAnomaly(int(m), str(c), int(lvl), float(s), split_services(str(sv)))
        for m, c, lvl, s, sv in zip(minutes, frame['cell_id'], frame['level'],
                                     frame['score'], frame['services'])
    ]


class PipelineService:
    """
    Runs one stage at a time for a fixed RunConfig.

    Artifacts live under ``config.out_dir``; raw inputs (activity, cells,
    DBUE) come from ``config.paths`` and default to the files ``synth``
    writes there.
    """

    def __init__(self, config: RunConfig, threads: Optional[int] = None, min_level: int = 1):
        self.config = config
        self.threads = threads
        self.min_level = min_level
        self.fingerprint = config.fingerprint()
        self.out_dir = config.out_dir
        self.logger = get_logger_with_context(
            __name__, method=config.method, fingerprint=self.fingerprint[:12]
        )

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    @property
    def method_dir(self) -> str:
        return self.path('models', self.config.method)

    @log_function_call
    def run(self, stage: str) -> StageResult:
        handlers = {
            'synth': self.synth,
            'train': self.train,
            'calibrate': self.calibrate,
            'detect': self.detect,
            'evaluate': self.evaluate,
            'pr-curve': self.pr_curve,
            'export-map': self.export_map,
            'run-all': self.run_all,
            'cross-validate': self.cross_validate,
            'ablation': self.ablation,
        }
        if stage not in handlers:
            raise ConfigError(f"unknown stage '{stage}', expected one of {STAGES + DRIVERS}")
        self.logger.add_context(stage=stage)
        try:
            result = handlers[stage]()
        finally:
            self.logger.remove_context('stage')
        self.logger.info("Stage finished", extra={'artifacts': len(result.artifacts)})
        return result

    # stages

    @log_execution_time
    def synth(self) -> StageResult:
        """Scenario file -> activity CSV, cell registry CSV and DBUE JSON."""
        if not self.config.paths.scenario:
            raise ConfigError("paths.scenario must be set for synth")
        scenario = replace(Scenario.load(self.config.paths.scenario), seed=self.config.seed)
        result = run_scenario(scenario, self.threads)
        with StageOutputs() as outputs:
            write_activity_csv(result.cube, outputs.add(self.path('activity.csv')))
            write_cell_registry(result.registry, outputs.add(self.path('cells.csv')))
            write_json(outputs.add(self.path('dbue.json')), dbue_document(result.events))
            return self._finish(outputs, 'synth', {
                'cells': len(result.registry),
                'services': list(result.cube.services),
                'span': [result.cube.start, result.cube.end],
                'events': len(result.events),
                'seed': scenario.seed,
            })

    @log_execution_time
    def train(self) -> StageResult:
        """Fit one model per active pair of the training fold, plus in-sample scores."""
        cube = self._load_cube()
        train, test = slice_fold(cube, self.config.folds, self.config.fold_index)
        active = filter_active_pairs(train, self.config.min_mean_rate)
        detector = self._detector()
        models, demoted = detector.fit(train, active)
        if isinstance(detector, AdaptiveDetector):
            fused = detector.training_scores(train, self.config.services, models)
        else:
            fused = detector.score(train, self.config.services, models)

        with StageOutputs() as outputs:
            entries = []
            for (cell_id, service), model in sorted(models.items()):
                header, arrays = model.to_artifact()
                header.update(format_version=FORMAT_VERSION, fingerprint=self.fingerprint)
                name = f"{cell_id}__{service}.npz"
                write_npz(outputs.add(os.path.join(self.method_dir, name)), header, arrays)
                entries.append({'cell_id': cell_id, 'service': service, 'file': name})

            inactive = sorted(set(cube.pairs()) - active)
            write_json(outputs.add(os.path.join(self.method_dir, 'manifest.json')), {
                'format_version': FORMAT_VERSION,
                'fingerprint': self.fingerprint,
                'method': self.config.method,
                'fold_index': self.config.fold_index,
                'test_span': [test.start, test.end],
                'services': list(self.config.services),
                'models': entries,
                'demoted': [
                    {'cell_id': c, 'service': s, 'reason': demoted[(c, s)]} for c, s in sorted(demoted)
                ],
                'inactive': [{'cell_id': c, 'service': s} for c, s in inactive],
            })
            write_csv(outputs.add(self.path('train_scores.csv')), fused_scores_frame(fused))
            return self._finish(outputs, 'train', {
                'models': len(entries),
                'demoted': len(demoted),
                'inactive': len(inactive),
                'test_span': [test.start, test.end],
            })

    @log_execution_time
    def calibrate(self) -> StageResult:
        """Training scores -> per-antenna thresholds."""
        self._read_manifest('train')
        frame = read_csv(
            self.path('train_scores.csv'), 'training scores',
            dtype={'cell_id': str, 'services': str}, keep_default_na=False,
        )
        scores = {
            str(cell): group['score'].to_numpy(dtype=float)
            for cell, group in frame.groupby('cell_id', sort=True)
        }
        thresholds = calibrate_thresholds(scores)
        with StageOutputs() as outputs:
            write_json(outputs.add(self.path('thresholds.json')), {
                'format_version': FORMAT_VERSION,
                'fingerprint': self.fingerprint,
                'method': self.config.method,
                **thresholds.to_dict(),
            })
            return self._finish(outputs, 'calibrate', {
                'calibrated': len(thresholds.thresholds),
                'uncalibrated': len(thresholds.uncalibrated),
            })

    @log_execution_time
    def detect(self) -> StageResult:
        """Models + test fold -> level >= 1 alarm stream."""
        cube = self._load_cube()
        _, test = slice_fold(cube, self.config.folds, self.config.fold_index)
        models = self._load_models(test)
        thresholds = self._read_thresholds()
        detector = self._detector()
        fused = detector.score(test, self.config.services, models)
        alarms = detect_alarms(fused, thresholds)
        antenna_minutes = len(test.cells) * test.n_minutes
        rates = level_rates(alarms, antenna_minutes)

        with StageOutputs() as outputs:
            write_csv(outputs.add(self.path('alarms.csv')), alarms_frame(alarms))
            return self._finish(outputs, 'detect', {
                'alarms': len(alarms),
                'level_rates': {str(k): v for k, v in rates.items()},
                'cells': list(test.cells),
                'test_span': [test.start, test.end],
                'antenna_minutes': antenna_minutes,
            })

    @log_execution_time
    def evaluate(self) -> StageResult:
        """Alarms + DBUE -> report at the configured sensitivity."""
        detected = self._read_manifest('detect')['summary']
        thresholds = self._read_thresholds()
        alarms = self._read_alarms()
        registry = load_cell_registry(self.config.resolve_path('cells'))
        cells = tuple(detected['cells'])
        missing = [c for c in cells if c not in registry]
        if missing:
            raise ConfigError(f"cells missing from the registry: {missing}")
        events = load_dbue(self.config.resolve_path('dbue'))
        mask = expand_ground_truth(
            events, registry, self.config.evaluation.default_radius_m,
            cells=cells, span=tuple(detected['test_span']),
        )
        sensitivity = self.config.sensitivity
        ev = self.config.evaluation
        report = score_run(
            select_alarms(alarms, thresholds, sensitivity), mask,
            level=1, n=ev.event_min_alarms, exclude_undetectable=ev.exclude_undetectable,
            sensitivity=sensitivity, fingerprint=self.fingerprint,
        )
        by_level = {}
        for level, name in LEVEL_SENSITIVITY.items():
            r = score_run(alarms, mask, level=level, n=ev.event_min_alarms,
                          exclude_undetectable=ev.exclude_undetectable, sensitivity=name)
            by_level[str(level)] = {
                'precision': r.precision, 'recall_minute': r.recall_minute,
                'recall_event': r.recall_event, 'noskill_precision': r.noskill_precision,
                'noskill_recall': r.noskill_recall,
            }

        document = report.to_dict()
        document.update(
            format_version=FORMAT_VERSION,
            method=self.config.method,
            test_span=list(detected['test_span']),
            levels=by_level,
            config=self.config.fingerprint_payload(),
        )
        with StageOutputs() as outputs:
            write_json(outputs.add(self.path(f'report_{sensitivity}.json')), document)
            return self._finish(outputs, 'evaluate', {
                'sensitivity': sensitivity,
                'confusion': document['confusion'],
                'precision': report.precision,
                'recall_minute': report.recall_minute,
                'recall_event': report.recall_event,
            }, manifest_name=f'evaluate_{sensitivity}')

    @log_execution_time
    def pr_curve(self) -> StageResult:
        """The six sensitivity reports -> PR-point CSV."""
        reports: Dict[str, EvaluationReport] = {}
        for sensitivity in SENSITIVITIES:
            path = self.path(f'report_{sensitivity}.json')
            if not os.path.exists(path):
                continue
            doc = read_json(path, 'evaluation report')
            check_fingerprint(doc.get('fingerprint'), self.fingerprint,
                              os.path.basename(path), self.config.force)
            reports[sensitivity] = EvaluationReport.from_dict(doc)
        points = pr_curve(reports, allow_partial=self.config.allow_partial)
        with StageOutputs() as outputs:
            write_csv(outputs.add(self.path('pr_curve.csv')), pr_curve_frame(points))
            return self._finish(outputs, 'pr-curve', {'points': points_summary(points)})

    @log_execution_time
    def export_map(self) -> StageResult:
        """Alarm stream -> GeoJSON points at the antenna locations."""
        self._read_manifest('detect')
        alarms = self._read_alarms()
        registry = load_cell_registry(self.config.resolve_path('cells'))
        collection = export_alarm_map(alarms, registry, self.min_level)
        with StageOutputs() as outputs:
            write_json(outputs.add(self.path('alarms.geojson')), collection)
            return self._finish(outputs, 'export-map', {
                'features': len(collection['features']), 'min_level': self.min_level,
            })

    # drivers

    def run_all(self) -> StageResult:
        """Every stage in order; synth is skipped when no scenario is configured."""
        stages = STAGES if self.config.paths.scenario else STAGES[1:]
        results = run_pipeline(self.config, stages, self.threads, self.min_level)
        curve = next(r for r in results if r.stage == 'pr-curve')
        return StageResult('run-all', sorted({p for r in results for p in r.artifacts}), {
            'stages': [r.stage for r in results],
            'points': curve.summary['points'],
        })

    @log_execution_time
    def cross_validate(self) -> StageResult:
        """
        Train, calibrate, detect and evaluate once per fold, each fold in
        ``crossval/fold_<k>/``, then pool the six reports over the folds into
        ``crossval/report_<sensitivity>.json`` and ``crossval/pr_curve.csv``.
        """
        inputs = absolute_inputs(self.config)
        per_fold: Dict[str, List[EvaluationReport]] = {s: [] for s in SENSITIVITIES}
        folds = []
        artifacts: List[str] = []
        for k in range(self.config.folds.n_folds):
            sub = self.config.with_overrides(
                fold_index=k, paths=inputs, out_dir=self.path('crossval', f'fold_{k}'),
            )
            for result in run_pipeline(sub, FIT_STAGES, self.threads):
                artifacts.extend(result.artifacts)
            for sensitivity in SENSITIVITIES:
                doc = read_json(os.path.join(sub.out_dir, f'report_{sensitivity}.json'),
                                'evaluation report')
                per_fold[sensitivity].append(EvaluationReport.from_dict(doc))
                if sensitivity == self.config.sensitivity:
                    folds.append({
                        'fold_index': k,
                        'test_span': doc['test_span'],
                        'precision': doc['precision'],
                        'recall_minute': doc['recall_minute'],
                        'recall_event': doc['recall_event'],
                    })
            self.logger.info("Fold evaluated", extra={'fold_index': k})

        pooled = {
            s: replace(pool_reports(reports), fingerprint=self.fingerprint)
            for s, reports in per_fold.items()
        }
        points = pr_curve(pooled)
        with StageOutputs() as outputs:
            for sensitivity, report in pooled.items():
                document = report.to_dict()
                document.update(format_version=FORMAT_VERSION, method=self.config.method,
                                folds=len(folds))
                write_json(outputs.add(self.path('crossval', f'report_{sensitivity}.json')),
                           document)
            write_csv(outputs.add(self.path('crossval', 'pr_curve.csv')), pr_curve_frame(points))
            result = self._finish(outputs, 'cross-validate', {
                'folds': folds,
                'confusion': pooled[self.config.sensitivity].to_dict()['confusion'],
                'points': points_summary(points),
            })
        return StageResult(result.stage, artifacts + result.artifacts, result.summary)

    @log_execution_time
    def ablation(self) -> StageResult:
        """
        One train..pr-curve run per service subset drawn from the configured
        services, plus the configured set itself; curves side by side in
        ``ablation/pr_curves.csv``.
        """
        available = set(self.config.services)
        subsets = [s for s in ABLATION_SUBSETS if set(s) <= available]
        if tuple(self.config.services) not in subsets:
            subsets.append(tuple(self.config.services))
        skipped = [join_services(s) for s in ABLATION_SUBSETS if not set(s) <= available]
        if skipped:
            self.logger.warning("Ablation subsets outside the configured services skipped",
                                extra={'skipped': skipped})

        curves = run_ablation(self.config, subsets, self.threads)
        frame = pd.DataFrame(
            [{'services': name, **point} for name, points in curves.items() for point in points],
            columns=['services', 'sensitivity', 'precision', 'recall_minute', 'recall_event'],
        )
        with StageOutputs() as outputs:
            write_csv(outputs.add(self.path('ablation', 'pr_curves.csv')), frame)
            return self._finish(outputs, 'ablation', {'subsets': curves})

    # helpers

    def _detector(self):
        if self.config.method == 'adaptive':
            return AdaptiveDetector(self.config.adaptive, self.config.holidays, self.threads)
        return SignatureDetector(self.config.signature, self.threads)

    def _load_cube(self) -> ActivityCube:
        cube = load_activity_csv(self.config.resolve_path('activity'))
        try:
            return cube.select_services(self.config.services)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def _load_models(self, test: ActivityCube) -> Dict[Pair, Any]:
        """
        Raises:
            ModelNotFoundError: a pair of the test cube has neither a model
                nor a recorded reason for having none
        """
        pairs = sorted(test.pairs())
        manifest_path = os.path.join(self.method_dir, 'manifest.json')
        if not os.path.exists(manifest_path):
            raise ModelNotFoundError(*pairs[0])
        manifest = read_json(manifest_path, 'model manifest')
        check_fingerprint(manifest.get('fingerprint'), self.fingerprint,
                          f"models/{self.config.method}/manifest.json", self.config.force)

        files = {(e['cell_id'], e['service']): e['file'] for e in manifest['models']}
        skipped = {(e['cell_id'], e['service']) for e in manifest['demoted'] + manifest['inactive']}
        model_cls = _MODEL_CLASSES[self.config.method]
        models = {}
        for pair in pairs:
            if pair in skipped:
                continue
            path = os.path.join(self.method_dir, files[pair]) if pair in files else None
            if path is None or not os.path.exists(path):
                raise ModelNotFoundError(*pair)
            header, arrays = read_npz(path)
            check_fingerprint(header.get('fingerprint'), self.fingerprint,
                              os.path.basename(path), self.config.force)
            models[pair] = model_cls.from_artifact(header, arrays)
        self.logger.info("Models loaded", extra={'models': len(models), 'skipped': len(skipped)})
        return models

    def _read_manifest(self, stage: str) -> Dict[str, Any]:
        name = f"manifests/{stage}.json"
        doc = read_json(self.path('manifests', f'{stage}.json'), f"{stage} stage manifest")
        check_fingerprint(doc.get('fingerprint'), self.fingerprint, name, self.config.force)
        return doc

    def _read_thresholds(self) -> LevelThresholds:
        doc = read_json(self.path('thresholds.json'), 'thresholds')
        check_fingerprint(doc.get('fingerprint'), self.fingerprint, 'thresholds.json',
                          self.config.force)
        return LevelThresholds.from_dict(doc)

    def _read_alarms(self) -> List[DetectedAnomaly]:
        frame = read_csv(
            self.path('alarms.csv'), 'alarm stream',
            dtype={'cell_id': str, 'services': str}, keep_default_na=False,
        )
        return alarms_from_frame(frame)

    def _finish(self, outputs: StageOutputs, stage: str, summary: Dict[str, Any],
                manifest_name: Optional[str] = None) -> StageResult:
        written = sorted(
            os.path.relpath(p, self.out_dir).replace(os.sep, '/') for p in outputs.paths
        )
        manifest = self.path('manifests', f'{manifest_name or stage}.json')
        write_json(outputs.add(manifest), {
            'format_version': FORMAT_VERSION,
            'stage': stage,
            'fingerprint': self.fingerprint,
            'config': self.config.fingerprint_payload(),
            'outputs': written,
            'summary': summary,
        })
        return StageResult(stage, list(outputs.paths), summary)


def absolute_inputs(config: RunConfig) -> RunPaths:
    """Input paths of ``config`` made absolute, for runs in other output directories."""
    return RunPaths(
        activity=os.path.abspath(config.resolve_path('activity')),
        cells=os.path.abspath(config.resolve_path('cells')),
        dbue=os.path.abspath(config.resolve_path('dbue')),
        scenario=config.paths.scenario,
    )


def run_pipeline(config: RunConfig, stages: Sequence[str] = STAGES,
                 threads: Optional[int] = None, min_level: int = 1) -> List[StageResult]:
    """
    Run stages in order; ``evaluate`` runs once per sensitivity so that
    ``pr-curve`` finds all six reports.
    """
    results = []
    for stage in stages:
        if stage == 'evaluate':
            for sensitivity in SENSITIVITIES:
                sub = replace(config, sensitivity=sensitivity)
                results.append(PipelineService(sub, threads).run(stage))
        else:
            results.append(PipelineService(config, threads, min_level).run(stage))
    return results


def run_ablation(config: RunConfig, subsets: Sequence[Sequence[str]] = ABLATION_SUBSETS,
                 threads: Optional[int] = None) -> Dict[str, List[Dict[str, Any]]]:
    """
    Train, calibrate, detect and evaluate once per service subset, each in
    its own directory under ``<out_dir>/ablation/``. Thresholds are
    recomputed per subset.

    Returns:
        Subset name (services joined by '+') -> PR points
    """
    inputs = absolute_inputs(config)
    curves: Dict[str, List[Dict[str, Any]]] = {}
    for subset in subsets:
        name = join_services(subset)
        sub = config.with_overrides(
            services=tuple(subset), paths=inputs,
            out_dir=os.path.join(config.out_dir, 'ablation', name),
        )
        results = run_pipeline(sub, FIT_STAGES, threads)
        curves[name] = results[-1].summary['points']
    return curves
