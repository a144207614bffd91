"""
Unit tests for per-antenna threshold calibration and anomaly levels.
"""

import math
import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
# Add tests to path for conftest
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from models.detection import DetectedAnomaly, FusedScores
from models.run_config import SENSITIVITIES
from services.level_service import (
    LevelThresholds,
    assign_level,
    assign_levels,
    calibrate_thresholds,
    detect_alarms,
    level_rates,
    rank_threshold,
    select_alarms,
)

from conftest import MONDAY

WEEK = 10080


def _log_uniform(n, seed):
    return np.log(np.random.default_rng(seed).random(n))


class TestRankThreshold:
    """Test the rank-from-the-rare-end rule."""

    def test_distinct_scores(self):
        assert rank_threshold(np.array([-5.0, -4.0, -3.0]), 2) == -4.0

    def test_ties_move_toward_fewer_alarms(self):
        assert rank_threshold(np.array([1.0, 2.0, 2.0, 2.0, 3.0]), 2) == 1.0

    def test_ties_at_the_rarest_rank(self):
        assert rank_threshold(np.array([2.0, 2.0, 3.0]), 1) is None


class TestCalibrateThresholds:
    """Test threshold calibration."""

    def test_one_week_threshold_is_the_rarest_score(self):
        scores = _log_uniform(WEEK, 1)
        thresholds = calibrate_thresholds({'A000': scores}, {'1w': WEEK})
        assert thresholds.for_cell('A000')['1w'] == scores.min()

    def test_every_sensitivity_is_calibrated(self):
        thresholds = calibrate_thresholds({'A000': _log_uniform(3 * WEEK, 2)})
        cell = thresholds.for_cell('A000')
        assert set(cell) == set(SENSITIVITIES)
        ordered = [cell[s] for s in SENSITIVITIES]
        assert ordered == sorted(ordered, reverse=True)

    def test_held_out_rate_matches_the_target(self):
        train = _log_uniform(240000, 3)
        held_out = _log_uniform(240000, 4)
        threshold = calibrate_thresholds({'A000': train}).for_cell('A000')['4h']
        rate = np.count_nonzero(held_out <= threshold) / held_out.size
        assert rate == pytest.approx(1 / 240, rel=0.25)

    @pytest.mark.parametrize('name', list(SENSITIVITIES))
    def test_training_crossings_equal_the_rank(self, name):
        scores = _log_uniform(4 * WEEK, 5)
        threshold = calibrate_thresholds({'A000': scores}).for_cell('A000')[name]
        assert np.count_nonzero(scores <= threshold) == math.ceil(scores.size / SENSITIVITIES[name])

    def test_constant_scores_are_uncalibrated(self):
        thresholds = calibrate_thresholds({'A000': np.full(2 * WEEK, -1.0)})
        assert thresholds.uncalibrated == ('A000',)
        assert thresholds.for_cell('A000') is None
        assert assign_level(-50.0, thresholds.for_cell('A000')) == 0

    def test_less_than_a_week_is_uncalibrated(self):
        thresholds = calibrate_thresholds({'A000': _log_uniform(WEEK - 1, 6)})
        assert thresholds.uncalibrated == ('A000',)

    def test_antennas_without_scores_are_excluded(self):
        thresholds = calibrate_thresholds({'A000': np.full(10, np.nan)})
        assert thresholds.thresholds == {}
        assert thresholds.uncalibrated == ()

    def test_missing_minutes_are_ignored(self):
        scores = np.concatenate([_log_uniform(WEEK, 7), np.full(500, np.nan)])
        thresholds = calibrate_thresholds({'A000': scores})
        assert thresholds.training_minutes == {'A000': WEEK}

    def test_document_form_reloads(self):
        thresholds = calibrate_thresholds({'A000': _log_uniform(WEEK, 8)})
        reloaded = LevelThresholds.from_dict(thresholds.to_dict())
        assert reloaded.thresholds == thresholds.thresholds


class TestAssignLevel:
    """Test level assignment."""

    @pytest.fixture
    def cell(self):
        return {'4h': -5.0, '8h': -6.0, '12h': -7.0, '1d': -8.0, '2d': -9.0, '1w': -10.0}

    @pytest.mark.parametrize('score,level', [
        (-4.9, 0),
        (-5.0, 1),
        (-7.5, 1),
        (-8.0, 2),
        (-9.9, 2),
        (-10.0, 3),
        (-40.0, 3),
    ])
    def test_boundaries_are_inclusive(self, cell, score, level):
        assert assign_level(score, cell) == level

    def test_none_threshold_is_never_crossed(self, cell):
        cell['1w'] = None
        assert assign_level(-40.0, cell) == 2

    def test_vectorized_matches_scalar(self, cell):
        scores = np.array([-4.0, -5.0, -8.5, -11.0, np.nan])
        levels = assign_levels(scores, cell)
        assert levels.tolist() == [0, 1, 2, 3, 0]

    def test_levels_are_nested(self):
        scores = _log_uniform(3 * WEEK, 9)
        cell = calibrate_thresholds({'A000': scores}).for_cell('A000')
        levels = assign_levels(scores, cell)
        assert np.count_nonzero(levels >= 3) <= np.count_nonzero(levels >= 2) \
            <= np.count_nonzero(levels >= 1)

    def test_long_run_level_one_rate(self):
        cell = calibrate_thresholds({'A000': _log_uniform(240000, 10)}).for_cell('A000')
        levels = assign_levels(_log_uniform(240000, 11), cell)
        assert np.count_nonzero(levels >= 1) / levels.size == pytest.approx(1 / 240, rel=0.25)


class TestAlarmStreams:
    """Test alarm emission and sensitivity selection."""

    @pytest.fixture
    def setup(self):
        scores = _log_uniform(2 * WEEK, 12)
        thresholds = calibrate_thresholds({'A000': scores, 'A001': scores * 2.0})
        fused = [
            FusedScores('A000', MONDAY, ('call4g',), scores, np.ones((1, scores.size), dtype=bool)),
            FusedScores('A001', MONDAY, ('call4g',), scores * 2.0,
                        np.ones((1, scores.size), dtype=bool)),
        ]
        return thresholds, fused

    def test_alarms_are_ordered_and_never_level_zero(self, setup):
        thresholds, fused = setup
        alarms = detect_alarms(fused, thresholds)
        assert alarms
        assert all(a.level >= 1 for a in alarms)
        keys = [(a.minute, a.cell_id) for a in alarms]
        assert keys == sorted(keys)
        assert all(a.services == ('call4g',) for a in alarms)

    def test_per_antenna_calibration_equalises_rates(self, setup):
        thresholds, fused = setup
        alarms = detect_alarms(fused, thresholds)
        per_cell = {c: sum(1 for a in alarms if a.cell_id == c) for c in ('A000', 'A001')}
        assert per_cell['A000'] == per_cell['A001'] == math.ceil(2 * WEEK / 240)

    def test_selection_is_nested_across_sensitivities(self, setup):
        thresholds, fused = setup
        alarms = detect_alarms(fused, thresholds)
        sizes = [len(select_alarms(alarms, thresholds, s)) for s in SENSITIVITIES]
        assert sizes == sorted(sizes, reverse=True)
        assert sizes[0] == len(alarms)

    def test_uncalibrated_antenna_emits_nothing(self):
        thresholds = LevelThresholds({}, ('A000',))
        fused = [FusedScores('A000', MONDAY, ('call4g',), np.array([-50.0]),
                             np.ones((1, 1), dtype=bool))]
        assert detect_alarms(fused, thresholds) == []

    def test_level_zero_alarm_cannot_be_built(self):
        with pytest.raises(ValueError):
            DetectedAnomaly(MONDAY, 'A000', 0, -1.0, ('call4g',))

    def test_level_rates(self):
        alarms = [
            DetectedAnomaly(MONDAY, 'A000', 1, -5.0, ('call4g',)),
            DetectedAnomaly(MONDAY + 1, 'A000', 3, -20.0, ('call4g',)),
        ]
        rates = level_rates(alarms, 100)
        assert rates == {1: 0.02, 2: 0.01, 3: 0.01}
