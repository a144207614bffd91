"""
Test configuration and fixtures for the urbanpulse test suite.

This module provides:
- Environment setup (log level, thread cap)
- Small synthetic cubes, registries and scenario files
- Assertion helpers for CLI result documents and artifact trees
"""

import json
import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

# Configure test environment
os.environ.update({
    'LOG_LEVEL': 'WARNING',
    'URBANPULSE_THREADS': '2',
})

from models.activity import ActivityCube, Cell, CellRegistry, parse_minute  # noqa: E402

MONDAY = parse_minute('2019-03-04T00:00Z')
CENTER = (48.8566, 2.3522)


@pytest.fixture
def monday():
    """Epoch minute of Monday 2019-03-04 00:00 UTC."""
    return MONDAY


@pytest.fixture
def two_cell_registry():
    """Two antennas 1 km apart in central Paris."""
    return CellRegistry([
        Cell('A000', 48.8566, 2.3522),
        Cell('A001', 48.8656, 2.3522),
    ])


@pytest.fixture
def poisson_cube():
    """Three weeks of Poisson(20) counts for two cells and two services."""
    rng = np.random.default_rng(42)
    n = 3 * 10080
    counts = rng.poisson(20.0, size=(2, 2, n)).astype(float)
    return ActivityCube(('A000', 'A001'), ('call4g', 'sms4g'), MONDAY, counts)


@pytest.fixture
def small_scenario(tmp_path):
    """
    Scenario and run-config files for a 2x2 grid over 5 weeks with two
    explicit events inside the first test fold.
    """
    scenario = {
        'start': '2019-03-04T00:00Z',
        'weeks': 5,
        'services': ['call4g', 'sms4g'],
        'grid': {'center': {'lat': CENTER[0], 'lon': CENTER[1]}, 'rows': 2, 'cols': 2,
                 'spacing_m': 400},
        'profile': {'base_rate': 15.0, 'noise': 'poisson', 'week_jitter': 0.0},
        'events': [
            {'id': 'stadium', 'shape': 'gradual_ramp', 'magnitude': 8.0,
             'lat': CENTER[0], 'lon': CENTER[1], 'onset': '2019-03-06T17:00Z',
             'duration': 240},
            {'id': 'outage', 'shape': 'jump_decay', 'magnitude': 12.0,
             'lat': CENTER[0], 'lon': CENTER[1], 'onset': '2019-03-09T10:00Z',
             'duration': 120},
        ],
    }
    config = {
        'method': 'signature',
        'services': ['call4g', 'sms4g'],
        'folds': {'n_folds': 3},
        'fold_index': 0,
        'seed': 11,
        'paths': {'scenario': 'scenario.json'},
    }
    (tmp_path / 'scenario.json').write_text(json.dumps(scenario))
    (tmp_path / 'run.json').write_text(json.dumps(config))
    return tmp_path


class TestHelpers:
    """Helper utilities for testing."""

    @staticmethod
    def assert_document_structure(document: dict):
        """Assert that a CLI document carries the common envelope."""
        assert 'success' in document
        assert 'metadata' in document
        metadata = document['metadata']
        assert 'timestamp' in metadata
        assert 'response_id' in metadata
        assert 'version' in metadata
        return document

    @staticmethod
    def assert_success_document(document: dict, stage: str = None):
        """Assert that a document reports a finished stage."""
        TestHelpers.assert_document_structure(document)
        assert document['success'] is True
        data = document['data']
        assert 'artifacts' in data
        assert 'summary' in data
        if stage:
            assert data['stage'] == stage
        return data

    @staticmethod
    def assert_error_document(document: dict, expected_code: int, expected_type: str = None):
        """Assert that a document is a proper error document."""
        TestHelpers.assert_document_structure(document)
        assert document['success'] is False
        error = document['error']
        assert 'type' in error
        assert 'message' in error
        assert error['code'] == expected_code
        if expected_type:
            assert error['type'] == expected_type
        return error

    @staticmethod
    def tree_bytes(root) -> dict:
        """Relative path -> file bytes for every file under ``root``."""
        out = {}
        for dirpath, _, filenames in os.walk(root):
            for name in filenames:
                full = os.path.join(dirpath, name)
                out[os.path.relpath(full, root).replace(os.sep, '/')] = open(full, 'rb').read()
        return out
