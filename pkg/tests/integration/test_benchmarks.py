"""
Acceptance benchmarks on an eight-week synthetic city: 50 antennas, four
services, 30 random events in the held-out weeks.

Training covers the first five weeks; the last three are the test fold.
"""

import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
# Add tests to path for conftest
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from models.activity import FoldSpec
from models.run_config import SENSITIVITIES, AdaptiveParams, SignatureParams
from services.adaptive_service import AdaptiveDetector
from services.evaluation_service import expand_ground_truth, score_run
from services.level_service import (
    calibrate_thresholds,
    detect_alarms,
    level_rates,
    select_alarms,
)
from services.signature_service import SignatureDetector
from services.synth_service import Scenario, run_scenario
from services.telemetry_service import filter_active_pairs, slice_fold

from conftest import CENTER

pytestmark = [pytest.mark.integration, pytest.mark.slow]

FOLDS = FoldSpec(test_days=((0, 35), (35, 56)))
TEST_FOLD = 1
MIN_MEAN_RATE = 0.1


@pytest.fixture(scope='module')
def city():
    scenario = Scenario.from_dict({
        'seed': 2024,
        'start': '2019-03-04T00:00Z',
        'weeks': 8,
        'services': ['call3g', 'call4g', 'sms3g', 'sms4g'],
        'grid': {'center': {'lat': CENTER[0], 'lon': CENTER[1]}, 'rows': 5, 'cols': 10,
                 'spacing_m': 400},
        'profile': {'base_rate': 30.0, 'daily_amplitude': 0.5, 'noise': 'poisson',
                    'week_jitter': 0.0},
        'random_events': {
            'count': 30,
            'window_start': '2019-04-09T00:00Z',
            'window_end': '2019-04-28T00:00Z',
            'magnitude_min': 5.0,
            'magnitude_max': 12.0,
        },
    })
    return run_scenario(scenario)


def _detector(method):
    if method == 'adaptive':
        return AdaptiveDetector(AdaptiveParams())
    return SignatureDetector(SignatureParams())


def _fit_and_detect(detector, cube):
    """Train on the first five weeks, calibrate, and return the held-out alarms."""
    train, test = slice_fold(cube, FOLDS, TEST_FOLD)
    services = cube.services
    models, _ = detector.fit(train, filter_active_pairs(train, MIN_MEAN_RATE))
    if isinstance(detector, AdaptiveDetector):
        in_sample = detector.training_scores(train, services, models)
    else:
        in_sample = detector.score(train, services, models)
    thresholds = calibrate_thresholds({f.cell_id: f.log_scores for f in in_sample})
    alarms = detect_alarms(detector.score(test, services, models), thresholds)
    return test, thresholds, alarms


class TestHeldOutLevelRates:
    """Alarm rates on event-free traffic match the calibration targets."""

    def test_signature_rates_on_nominal_traffic(self, city):
        test, _, alarms = _fit_and_detect(_detector('signature'), city.nominal)
        assert len(test.cells) == 50
        rates = level_rates(alarms, len(test.cells) * test.n_minutes)
        assert 1 / 300 <= rates[1] <= 1 / 190
        assert rates[3] <= 3 / 10080


@pytest.fixture(scope='module', params=['signature', 'adaptive'])
def skill(request, city):
    test, thresholds, alarms = _fit_and_detect(_detector(request.param), city.cube)
    mask = expand_ground_truth(
        city.events, city.registry, cells=test.cells, span=(test.start, test.end),
    )
    selected = {s: select_alarms(alarms, thresholds, s) for s in SENSITIVITIES}
    reports = {s: score_run(selected[s], mask, sensitivity=s) for s in SENSITIVITIES}
    return selected, reports


class TestDetectionSkill:
    """Both detectors find the injected events well above chance."""

    def test_event_recall(self, skill):
        _, reports = skill
        report = reports['4h']
        assert report.events_total == 30
        assert report.recall_event >= 0.8

    def test_jump_decay_latency(self, city, skill):
        _, reports = skill
        jumps = {s.event_id for s in city.specs if s.shape == 'jump_decay'}
        latencies = [e['latency_min'] for e in reports['4h'].events
                     if e['id'] in jumps and e['detected']]
        assert latencies
        assert max(latencies) <= 15

    def test_precision_beats_chance(self, skill):
        _, reports = skill
        report = reports['4h']
        assert report.precision >= 10 * report.noskill_precision


class TestPrCurveShape:
    """Lower sensitivity never adds alarms or minute-wise recall."""

    def test_alarm_counts_shrink(self, skill):
        selected, _ = skill
        counts = [len(selected[s]) for s in SENSITIVITIES]
        assert counts == sorted(counts, reverse=True)

    def test_minute_recall_shrinks(self, skill):
        _, reports = skill
        recalls = np.array([reports[s].recall_minute for s in SENSITIVITIES])
        assert np.all(np.diff(recalls) <= 0)
