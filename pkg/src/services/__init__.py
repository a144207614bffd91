"""
Pipeline services: ingestion, detectors, calibration, evaluation, synthetic
benchmark and stage orchestration.
"""
