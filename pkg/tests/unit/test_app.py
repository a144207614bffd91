"""
Unit tests for the command-line entry point.

The pipeline service is mocked so these tests only cover argument parsing,
config resolution, exit codes and the printed result document.
"""

import json
import os
import sys

import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..', 'src'))
# Add tests to path for conftest
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from app import build_parser, load_config, main
from models.errors import (
    ActivityValidationError,
    ConfigError,
    DegenerateModelError,
    FingerprintMismatchError,
    IncompleteCurveError,
    InsufficientDataError,
    ModelNotFoundError,
)
from services.pipeline_service import StageResult

from conftest import TestHelpers


def _printed(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def mock_pipeline(mocker):
    service_cls = mocker.patch('app.PipelineService')
    service_cls.return_value.run.return_value = StageResult(
        'train', ['out/manifests/train.json', 'out/models/signature/manifest.json'], {'models': 4}
    )
    return service_cls


class TestParser:
    """Test command-line parsing."""

    def test_stage_is_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_unknown_stage(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['deploy'])

    def test_flags(self):
        args = build_parser().parse_args([
            'evaluate', '--method', 'adaptive', '--services', 'call4g,sms4g',
            '--sensitivity', '1d', '--seed', '7', '--out-dir', '/tmp/x', '--fold', '2',
            '--force', '--allow-partial',
        ])
        assert args.stage == 'evaluate'
        assert args.fold_index == 2
        assert args.force is True
        assert args.allow_partial is True

    def test_unset_flags_are_none(self):
        args = build_parser().parse_args(['train'])
        assert args.force is None
        assert args.seed is None
        assert args.min_level == 1

    def test_min_level_range(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['export-map', '--min-level', '4'])


class TestLoadConfig:
    """Test config file plus flag overrides."""

    def test_flags_override_the_file(self, small_scenario):
        args = build_parser().parse_args([
            'train', '--config', str(small_scenario / 'run.json'),
            '--method', 'adaptive', '--seed', '3', '--services', 'call4g',
        ])
        config = load_config(args)
        assert config.method == 'adaptive'
        assert config.seed == 3
        assert config.services == ('call4g',)
        assert config.paths.scenario == os.path.join(str(small_scenario), 'scenario.json')

    def test_file_values_survive_without_flags(self, small_scenario):
        args = build_parser().parse_args(['train', '--config', str(small_scenario / 'run.json')])
        config = load_config(args)
        assert config.seed == 11
        assert config.force is False

    def test_defaults_without_a_file(self):
        config = load_config(build_parser().parse_args(['synth', '--out-dir', 'runs/a']))
        assert config.out_dir == 'runs/a'


class TestMain:
    """Test exit codes and printed documents."""

    def test_success(self, mock_pipeline, capsys, tmp_path):
        code = main(['train', '--out-dir', str(tmp_path)])
        assert code == 0
        data = TestHelpers.assert_success_document(_printed(capsys), 'train')
        assert data['summary'] == {'models': 4}
        mock_pipeline.return_value.run.assert_called_once_with('train')

    def test_min_level_is_forwarded(self, mock_pipeline, capsys):
        main(['export-map', '--min-level', '2'])
        _, kwargs = mock_pipeline.call_args
        assert kwargs['min_level'] == 2

    @pytest.mark.parametrize('error,code,error_type', [
        (ConfigError('bad config'), 2, 'CONFIG_ERROR'),
        (ActivityValidationError('negative count', line=4), 3, 'VALIDATION_ERROR'),
        (InsufficientDataError('too short'), 4, 'INSUFFICIENT_DATA'),
        (DegenerateModelError('zero variance'), 4, 'DEGENERATE_MODEL'),
        (ModelNotFoundError('A000', 'call4g'), 5, 'MODEL_NOT_FOUND'),
        (FingerprintMismatchError('differs'), 6, 'FINGERPRINT_MISMATCH'),
        (IncompleteCurveError('missing 1w'), 7, 'INCOMPLETE_CURVE'),
    ])
    def test_domain_errors(self, mock_pipeline, capsys, error, code, error_type):
        mock_pipeline.return_value.run.side_effect = error
        assert main(['detect']) == code
        TestHelpers.assert_error_document(_printed(capsys), code, error_type)

    def test_unexpected_error(self, mock_pipeline, capsys):
        mock_pipeline.return_value.run.side_effect = RuntimeError('boom')
        assert main(['detect']) == 1
        error = TestHelpers.assert_error_document(_printed(capsys), 1, 'INTERNAL_ERROR')
        assert 'boom' in error['message']

    def test_bad_config_file(self, mock_pipeline, capsys, tmp_path):
        path = tmp_path / 'run.json'
        path.write_text(json.dumps({'method': 'signature', 'colour': 'blue'}))
        assert main(['train', '--config', str(path)]) == 2
        TestHelpers.assert_error_document(_printed(capsys), 2, 'CONFIG_ERROR')
        mock_pipeline.assert_not_called()

    def test_unknown_subcommand_prints_a_usage_error(self, mock_pipeline, capsys):
        assert main(['deploy']) == 2
        error = TestHelpers.assert_error_document(_printed(capsys), 2, 'CONFIG_ERROR')
        assert 'invalid command line' in error['message']
        mock_pipeline.assert_not_called()

    def test_help_still_exits_cleanly(self, mock_pipeline):
        with pytest.raises(SystemExit) as exc_info:
            main(['--help'])
        assert exc_info.value.code == 0

    @pytest.mark.parametrize('driver', ['run-all', 'cross-validate', 'ablation'])
    def test_drivers_are_subcommands(self, mock_pipeline, capsys, driver):
        mock_pipeline.return_value.run.return_value = StageResult(driver, [], {})
        assert main([driver]) == 0
        TestHelpers.assert_success_document(_printed(capsys), driver)
        mock_pipeline.return_value.run.assert_called_once_with(driver)

    def test_invalid_fold_override(self, mock_pipeline, capsys):
        assert main(['train', '--fold', '9']) == 2
        TestHelpers.assert_error_document(_printed(capsys), 2, 'CONFIG_ERROR')

    def test_missing_model_without_mocks(self, capsys, tmp_path):
        (tmp_path / 'activity.csv').write_text(
            'minute,cell_id,service,count\n'
            + ''.join(f'{m},A000,call4g,5\n' for m in range(25000000, 25000000 + 3 * 1440))
        )
        code = main(['detect', '--out-dir', str(tmp_path), '--services', 'call4g'])
        assert code == 5
        error = TestHelpers.assert_error_document(_printed(capsys), 5, 'MODEL_NOT_FOUND')
        assert error['details'] == {'cell_id': 'A000', 'service': 'call4g'}
