"""
Unit tests for DBUE parsing, ground-truth expansion and scoring.
"""

import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
# Add tests to path for conftest
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from models.activity import Cell, CellRegistry, parse_minute
from models.detection import DetectedAnomaly
from models.errors import DbueValidationError, IncompleteCurveError
from models.run_config import SENSITIVITIES
from services.evaluation_service import (
    EvaluationReport,
    GroundTruthMask,
    UncommonEvent,
    antennas_in_range,
    expand_ground_truth,
    export_alarm_map,
    load_dbue,
    noskill_baselines,
    parse_dbue,
    parse_event,
    pool_reports,
    pr_curve,
    pr_curve_frame,
    score_run,
)
from utils.geo import grid_points, haversine_m, offset_latlon

from conftest import CENTER, MONDAY

SAMPLE_DBUE = os.path.join(os.path.dirname(__file__), '..', '..', 'data', 'sample_dbue.json')


def _record(**overrides):
    record = {
        'id': 'E1',
        'epicenters': [{'lat': CENTER[0], 'lon': CENTER[1]}],
        'start': '2019-03-06T18:00Z',
    }
    record.update(overrides)
    return record


def _alarm(minute, cell_id='A000', level=1):
    return DetectedAnomaly(minute, cell_id, level, -10.0, ('call4g',))


@pytest.fixture
def registry():
    near = offset_latlon(CENTER[0], CENTER[1], 100.0, 0.0)
    far = offset_latlon(CENTER[0], CENTER[1], 5000.0, 0.0)
    return CellRegistry([
        Cell('A000', CENTER[0], CENTER[1]),
        Cell('A001', *near),
        Cell('A002', *far),
    ])


class TestParseDbue:
    """Test DBUE schema validation."""

    def test_sample_database_loads(self):
        events = load_dbue(SAMPLE_DBUE)
        assert len(events) == 10
        assert len({e.event_id for e in events}) == 10

    def test_end_before_start_is_rejected(self):
        events, rejected = parse_dbue([_record(end='2019-03-06T17:00Z')])
        assert events == []
        assert rejected[0]['id'] == 'E1'
        assert 'end' in rejected[0]['reason']

    @pytest.mark.parametrize('missing,reason', [
        ('start', 'missing start'),
        ('epicenters', 'missing epicenter'),
        ('id', 'missing id'),
    ])
    def test_missing_required_field(self, missing, reason):
        record = _record()
        del record[missing]
        _, rejected = parse_dbue([record, _record(id='E2')])
        assert len(rejected) == 1
        assert rejected[0]['index'] == 0
        assert reason in rejected[0]['reason']

    def test_unknown_field_is_rejected(self):
        _, rejected = parse_dbue([_record(venue='stadium')])
        assert 'unknown fields' in rejected[0]['reason']

    def test_duplicate_id_keeps_the_first(self):
        events, rejected = parse_dbue([_record(), _record(start='2019-03-07T18:00Z')])
        assert [e.start for e in events] == [parse_minute('2019-03-06T18:00Z')]
        assert rejected[0]['index'] == 1
        assert 'duplicate' in rejected[0]['reason']

    def test_events_wrapper_object_is_accepted(self):
        events, _ = parse_dbue({'events': [_record()]})
        assert len(events) == 1

    @pytest.mark.parametrize('document', [{'id': 'E1'}, 'events', 42])
    def test_non_list_document(self, document):
        with pytest.raises(DbueValidationError):
            parse_dbue(document)

    def test_bad_epicenter_coordinates(self):
        with pytest.raises(ValueError):
            parse_event(_record(epicenters=[{'lat': 95.0, 'lon': 2.0}]))

    def test_event_document_reloads(self):
        event = parse_event(_record(end='2019-03-06T21:30Z', radius_m=500, pre_buffer_min=60))
        assert parse_event(event.to_dict()) == event


class TestWindows:
    """Test tolerance windows."""

    def test_bounded_event_with_buffers(self):
        event = parse_event(_record(end='2019-03-06T21:30Z', pre_buffer_min=60,
                                    post_buffer_min=30))
        start = parse_minute('2019-03-06T18:00Z')
        end = parse_minute('2019-03-06T21:30Z')
        assert event.windows() == [(start - 60, end + 30)]

    def test_start_only_event_uses_the_detection_window(self):
        event = parse_event(_record())
        start = parse_minute('2019-03-06T18:00Z')
        assert event.windows() == [(start, start + 15)]

    def test_multi_day_event_has_one_window_per_day(self):
        event = parse_event(_record(days=[
            {'date': f'2019-03-0{d}', 'start_time': '10:00', 'end_time': '12:00'}
            for d in (6, 7, 8)
        ]))
        windows = event.windows()
        assert len(windows) == 3
        assert windows[0] == (parse_minute('2019-03-06T10:00Z'), parse_minute('2019-03-06T12:00Z'))
        assert windows[2][0] - windows[0][0] == 2 * 1440


class TestGroundTruth:
    """Test footprint expansion."""

    def test_radius_boundary(self):
        event = UncommonEvent('E1', (CENTER,), MONDAY, radius_m=300.0)
        registry = CellRegistry([
            Cell('AT', CENTER[0], CENTER[1]),
            Cell('IN', *offset_latlon(CENTER[0], CENTER[1], 299.0, 0.0)),
            Cell('OUT', *offset_latlon(CENTER[0], CENTER[1], 301.0, 0.0)),
        ])
        cells = ('AT', 'IN', 'OUT')
        assert antennas_in_range(event, registry, cells, 300.0).tolist() == [0, 1]

    def test_grid_matches_brute_force_distances(self):
        points = grid_points(CENTER[0], CENTER[1], 11, 11, 100.0)
        registry = CellRegistry([Cell(f'G{i:03d}', lat, lon) for i, (lat, lon) in enumerate(points)])
        cells = tuple(registry)
        event = UncommonEvent('E1', (CENTER,), MONDAY, radius_m=250.0)

        expected = [i for i, c in enumerate(cells)
                    if haversine_m(CENTER[0], CENTER[1], registry[c].lat, registry[c].lon) <= 250.0]
        assert antennas_in_range(event, registry, cells, 300.0).tolist() == expected

    def test_default_radius_applies_without_event_radius(self, registry):
        event = UncommonEvent('E1', (CENTER,), MONDAY)
        assert antennas_in_range(event, registry, tuple(registry), 50.0).tolist() == [0]

    def test_multiple_epicenters_are_unioned(self, registry):
        far = registry['A002']
        event = UncommonEvent('E1', (CENTER, (far.lat, far.lon)), MONDAY, radius_m=50.0)
        assert antennas_in_range(event, registry, tuple(registry), 300.0).tolist() == [0, 2]

    def test_window_end_is_inclusive(self, registry):
        event = UncommonEvent('E1', (CENTER,), MONDAY + 10)
        mask = expand_ground_truth([event], registry, span=(MONDAY, MONDAY + 100))
        row = mask.mask[0]
        assert row[10:26].all()
        assert not row[9]
        assert not row[26]
        assert mask.size == 2 * 16

    def test_multi_day_mask(self, registry):
        event = parse_event(_record(radius_m=50, days=[
            {'date': f'2019-03-0{d}', 'start_time': '10:00', 'end_time': '12:00'}
            for d in (4, 5, 6)
        ]))
        mask = expand_ground_truth([event], registry, span=(MONDAY, MONDAY + 7 * 1440))
        assert mask.size == 3 * 121

    def test_windows_are_clipped_to_the_span(self, registry):
        event = UncommonEvent('E1', (CENTER,), MONDAY - 5, end=MONDAY + 5, radius_m=50.0)
        mask = expand_ground_truth([event], registry, span=(MONDAY, MONDAY + 100))
        assert mask.size == 6

    def test_out_of_span_and_undetectable_events(self, registry):
        events = [
            UncommonEvent('early', (CENTER,), MONDAY - 1000),
            UncommonEvent('nowhere', ((0.0, 0.0),), MONDAY + 10),
        ]
        mask = expand_ground_truth(events, registry, span=(MONDAY, MONDAY + 100))
        assert mask.out_of_span == ('early',)
        assert mask.undetectable == ('nowhere',)
        assert mask.size == 0
        assert [f.event_id for f in mask.footprints] == ['nowhere']

    def test_cells_subset(self, registry):
        event = UncommonEvent('E1', (CENTER,), MONDAY, radius_m=500.0)
        mask = expand_ground_truth([event], registry, cells=('A001', 'A002'),
                                   span=(MONDAY, MONDAY + 50))
        assert mask.cells == ('A001', 'A002')
        assert mask.mask[:, 0].tolist() == [True, False]


class TestNoSkill:
    """Test the random-detector baselines."""

    def test_known_values(self):
        assert noskill_baselines(1000, 100000, 1 / 240) == (0.01, 1 / 240)

    def test_empty_mask(self):
        assert noskill_baselines(0, 100000, 0.1)[0] == 0.0

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            noskill_baselines(0, 0, 0.1)

    def test_random_detector_matches_the_baselines(self):
        rng = np.random.default_rng(21)
        n_cells, n_minutes, rate = 200, 5000, 1 / 240
        cells = tuple(f'C{i:03d}' for i in range(n_cells))
        truth = np.zeros((n_cells, n_minutes), dtype=bool)
        truth[:20] = True
        mask = GroundTruthMask(cells, MONDAY, n_minutes, truth)

        hit = np.argwhere(rng.random((n_cells, n_minutes)) < rate)
        alarms = [_alarm(MONDAY + int(m), cells[c]) for c, m in hit]
        report = score_run(alarms, mask, rate=rate)

        p0, r0 = report.noskill_precision, report.noskill_recall
        assert p0 == pytest.approx(0.1)
        assert r0 == rate
        sd_p = np.sqrt(p0 * (1 - p0) / len(alarms))
        sd_r = np.sqrt(r0 * (1 - r0) / mask.size)
        assert abs(report.precision - p0) < 4 * sd_p
        assert abs(report.recall_minute - r0) < 4 * sd_r


class TestScoreRun:
    """Test the confusion matrix and event-wise recall."""

    @pytest.fixture
    def mask(self, registry):
        events = [UncommonEvent('E1', (CENTER,), MONDAY + 100, radius_m=50.0)]
        return expand_ground_truth(events, registry, span=(MONDAY, MONDAY + 1000))

    def test_single_alarm_in_footprint(self, mask):
        report = score_run([_alarm(MONDAY + 105)], mask)
        assert report.tp == 1
        assert report.fp == 0
        assert report.fn == mask.size - 1
        assert report.precision == 1.0
        assert report.recall_event == 1.0
        assert report.events[0]['latency_min'] == 5
        assert report.events[0]['first_alarm'] == '2019-03-04T01:45Z'

    def test_no_alarms(self, mask):
        report = score_run([], mask)
        assert report.precision is None
        assert report.recall_minute == 0.0
        assert report.recall_event == 0.0
        assert report.fp == 0

    def test_confusion_partitions_the_grid(self, mask):
        rng = np.random.default_rng(5)
        alarms = [_alarm(MONDAY + int(m), c) for c in ('A000', 'A001', 'A002')
                  for m in rng.choice(1000, 60, replace=False)]
        report = score_run(alarms, mask)
        assert report.evaluated == 3 * 1000
        assert report.tp + report.fn == mask.size

    def test_alarms_below_the_level_are_ignored(self, mask):
        report = score_run([_alarm(MONDAY + 105, level=1)], mask, level=2)
        assert report.tp == 0
        assert report.precision is None

    def test_alarms_outside_the_grid_are_ignored(self, mask):
        report = score_run([_alarm(MONDAY + 5000), _alarm(MONDAY + 105, 'ZZZ')], mask)
        assert report.tp + report.fp == 0

    def test_minimum_alarm_count(self, mask):
        report = score_run([_alarm(MONDAY + 105)], mask, n=2)
        assert report.recall_event == 0.0
        report = score_run([_alarm(MONDAY + 105), _alarm(MONDAY + 106)], mask, n=2)
        assert report.recall_event == 1.0
        assert report.events[0]['alarms'] == 2

    def test_alarms_outside_the_footprint_do_not_count_toward_n(self, mask):
        # A001 lies 100 m from the epicenter, beyond the 50 m radius
        report = score_run([_alarm(MONDAY + 105), _alarm(MONDAY + 106, 'A001')], mask, n=2)
        assert report.recall_event == 0.0
        assert report.events[0]['alarms'] == 1
        assert report.fp == 1

    def test_overlapping_footprints_count_once(self, registry):
        events = [
            UncommonEvent('E1', (CENTER,), MONDAY + 100, radius_m=50.0),
            UncommonEvent('E2', (CENTER,), MONDAY + 100, radius_m=50.0),
        ]
        mask = expand_ground_truth(events, registry, span=(MONDAY, MONDAY + 1000))
        report = score_run([_alarm(MONDAY + 101)], mask)
        assert report.tp == 1
        assert report.events_detected == 2

    def test_undetectable_events(self, registry):
        events = [
            UncommonEvent('E1', (CENTER,), MONDAY + 100, radius_m=50.0),
            UncommonEvent('nowhere', ((0.0, 0.0),), MONDAY + 100),
        ]
        mask = expand_ground_truth(events, registry, span=(MONDAY, MONDAY + 1000))
        alarms = [_alarm(MONDAY + 101)]

        counted = score_run(alarms, mask)
        assert counted.events_total == 2
        assert counted.recall_event == 0.5

        excluded = score_run(alarms, mask, exclude_undetectable=True)
        assert excluded.events_total == 1
        assert excluded.recall_event == 1.0
        assert excluded.undetectable == ('nowhere',)

    def test_sensitivity_sets_the_noskill_rate(self, mask):
        report = score_run([], mask, sensitivity='1d')
        assert report.noskill_recall == 1 / 1440
        assert report.noskill_precision == mask.size / mask.total

    def test_report_document_reloads(self, mask):
        report = score_run([_alarm(MONDAY + 105)], mask, sensitivity='4h', fingerprint='abc')
        assert EvaluationReport.from_dict(report.to_dict()) == report


class TestPoolReports:
    """Test pooling of per-fold reports."""

    @pytest.fixture
    def events(self):
        return [UncommonEvent('E1', (CENTER,), MONDAY + 100, radius_m=50.0)]

    @pytest.fixture
    def alarms(self):
        return [_alarm(MONDAY + 105), _alarm(MONDAY + 700, 'A001')]

    def _score(self, events, registry, alarms, span, sensitivity='4h'):
        mask = expand_ground_truth(events, registry, span=span)
        return score_run(alarms, mask, sensitivity=sensitivity)

    def test_pooled_folds_match_the_whole_span(self, events, registry, alarms):
        folds = [
            self._score(events, registry, alarms, (MONDAY, MONDAY + 500)),
            self._score(events, registry, alarms, (MONDAY + 500, MONDAY + 1000)),
        ]
        whole = self._score(events, registry, alarms, (MONDAY, MONDAY + 1000))
        pooled = pool_reports(folds)

        assert (pooled.tp, pooled.fp, pooled.fn, pooled.tn) == \
            (whole.tp, whole.fp, whole.fn, whole.tn)
        assert pooled.precision == pytest.approx(whole.precision)
        assert pooled.recall_event == whole.recall_event == 1.0
        assert pooled.noskill_precision == pytest.approx(whole.noskill_precision)
        assert pooled.noskill_recall == whole.noskill_recall

    def test_event_out_of_one_fold_is_counted_once(self, events, registry, alarms):
        folds = [
            self._score(events, registry, alarms, (MONDAY, MONDAY + 500)),
            self._score(events, registry, alarms, (MONDAY + 500, MONDAY + 1000)),
        ]
        assert folds[1].out_of_span == ('E1',)
        pooled = pool_reports(folds)
        assert pooled.events_total == 1
        assert pooled.out_of_span == ()
        assert [e['id'] for e in pooled.events] == ['E1']

    def test_mixed_sensitivities_are_rejected(self, events, registry, alarms):
        span = (MONDAY, MONDAY + 1000)
        with pytest.raises(ValueError):
            pool_reports([self._score(events, registry, alarms, span, '4h'),
                          self._score(events, registry, alarms, span, '1w')])

    def test_nothing_to_pool(self):
        with pytest.raises(ValueError):
            pool_reports([])


class TestPrCurve:
    """Test PR curve assembly."""

    @pytest.fixture
    def reports(self, registry):
        events = [UncommonEvent('E1', (CENTER,), MONDAY + 100, end=MONDAY + 400, radius_m=50.0)]
        mask = expand_ground_truth(events, registry, span=(MONDAY, MONDAY + 2000))
        rng = np.random.default_rng(8)
        candidates = [_alarm(MONDAY + int(m), c) for c in ('A000', 'A001', 'A002')
                      for m in rng.choice(2000, 300, replace=False)]
        rng.shuffle(candidates)
        out = {}
        for i, name in enumerate(SENSITIVITIES):
            kept = candidates[:len(candidates) >> i]
            out[name] = score_run(kept, mask, sensitivity=name)
        return out

    def test_points_follow_sensitivity_order(self, reports):
        points = pr_curve(reports)
        assert [p.sensitivity for p in points] == list(SENSITIVITIES)

    def test_recall_shrinks_with_fewer_alarms(self, reports):
        recalls = [p.recall_minute for p in pr_curve(reports)]
        assert recalls == sorted(recalls, reverse=True)

    def test_missing_sensitivity_is_refused(self, reports):
        del reports['2d']
        with pytest.raises(IncompleteCurveError) as exc_info:
            pr_curve(reports)
        assert exc_info.value.details['missing'] == ['2d']

    def test_partial_curve_on_request(self, reports):
        del reports['2d']
        points = pr_curve(reports, allow_partial=True)
        assert [p.sensitivity for p in points] == ['4h', '8h', '12h', '1d', '1w']

    def test_frame_columns(self, reports):
        frame = pr_curve_frame(pr_curve(reports))
        assert list(frame.columns) == ['sensitivity', 'precision', 'recall_minute', 'recall_event']
        assert len(frame) == 6


class TestAlarmMap:
    """Test GeoJSON export."""

    def test_min_level_filter_and_coordinates(self, registry):
        alarms = [_alarm(MONDAY + 1, 'A001', level=3), _alarm(MONDAY, 'A000', level=1)]
        collection = export_alarm_map(alarms, registry, min_level=2)
        assert collection['type'] == 'FeatureCollection'
        assert len(collection['features']) == 1
        feature = collection['features'][0]
        cell = registry['A001']
        assert feature['geometry']['coordinates'] == [cell.lon, cell.lat]
        assert feature['properties']['level'] == 3
        assert feature['properties']['services'] == 'call4g'

    def test_features_are_time_ordered(self, registry):
        alarms = [_alarm(MONDAY + 5, 'A000'), _alarm(MONDAY + 1, 'A001')]
        minutes = [f['properties']['minute'] for f in export_alarm_map(alarms, registry)['features']]
        assert minutes == sorted(minutes)
