"""
Command-line entry point for the urbanpulse pipeline.

Usage:
    python src/app.py <subcommand> [--config run.json] [flags]

Subcommands map one-to-one onto pipeline stages:
1. synth       scenario file -> activity CSV, cell registry, DBUE
2. train       training fold -> persisted per-pair models + training scores
3. calibrate   training scores -> per-antenna thresholds
4. detect      models + test fold -> alarm stream
5. evaluate    alarms + DBUE -> report at one sensitivity
6. pr-curve    six reports -> precision/recall CSV
7. export-map  alarms -> GeoJSON

Drivers chain stages over several runs:
- run-all         every stage in order, evaluate once per sensitivity
- cross-validate  train..pr-curve once per fold, reports pooled over folds
- ablation        train..pr-curve once per service subset

Every invocation prints exactly one JSON document on stdout and exits with
the code of the error class that stopped it (0 on success).

Version: 0.1.0
"""

import argparse
import os
import sys
from typing import Any, Dict, List, Optional

from models.errors import UrbanPulseError
from models.responses import (
    create_error_response,
    create_exception_response,
    create_success_response,
    render_response,
)
from models.run_config import METHODS, SENSITIVITIES, RunConfig
from services.pipeline_service import DRIVERS, STAGES, PipelineService
from utils.logger import log_execution_time, setup_logger

logger = setup_logger(__name__)

USAGE_EXIT_CODE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='urbanpulse',
        description='Anomaly detection on per-antenna mobile network activity.',
    )
    parser.add_argument('stage', choices=STAGES + DRIVERS, help='pipeline stage or driver to run')
    parser.add_argument('--config', help='RunConfig JSON file')
    parser.add_argument('--method', choices=METHODS)
    parser.add_argument('--services', help='comma-separated service subset, e.g. call4g,sms4g')
    parser.add_argument('--sensitivity', choices=tuple(SENSITIVITIES))
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out-dir', dest='out_dir')
    parser.add_argument('--fold', dest='fold_index', type=int, help='index of the test fold')
    parser.add_argument('--min-level', dest='min_level', type=int, default=1, choices=(1, 2, 3),
                        help='lowest alarm level exported by export-map')
    parser.add_argument('--force', action='store_true', default=None,
                        help='accept artifacts with a different fingerprint')
    parser.add_argument('--allow-partial', dest='allow_partial', action='store_true', default=None,
                        help='emit a PR curve with missing sensitivities')
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """
    Read the config file (if any) and apply the command-line overrides.

    Raises:
        ConfigError: unreadable file, unknown keys, invalid values
    """
    config = RunConfig.load(args.config) if args.config else RunConfig()
    return config.with_overrides(
        method=args.method,
        services=args.services,
        sensitivity=args.sensitivity,
        seed=args.seed,
        out_dir=args.out_dir,
        fold_index=args.fold_index,
        force=args.force,
        allow_partial=args.allow_partial,
    )


@log_execution_time
def run(stage: str, config: RunConfig, min_level: int = 1) -> Dict[str, Any]:
    """
    Run one stage and build its result document.

    Args:
        stage: Subcommand name
        config: Fully resolved RunConfig
        min_level: Lowest alarm level for export-map

    Returns:
        Success document; errors propagate to the caller
    """
    os.environ['URBANPULSE_RUN_ID'] = config.fingerprint()[:12]
    result = PipelineService(config, min_level=min_level).run(stage)
    return create_success_response(result.stage, result.artifacts, result.summary)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run the stage, print the result document.

    Returns:
        Process exit code
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        if not e.code:
            raise
        # argparse already printed the usage on stderr
        print(render_response(create_error_response(
            'invalid command line, see --help', exit_code=USAGE_EXIT_CODE
        )))
        return USAGE_EXIT_CODE

    try:
        config = load_config(args)
        document = run(args.stage, config, args.min_level)
        exit_code = 0
    except UrbanPulseError as e:
        logger.warning(f"{args.stage} failed: {e.message}", extra={
            'error_type': e.error_type, 'exit_code': e.exit_code,
        })
        document = create_exception_response(e)
        exit_code = e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error in {args.stage}: {e}", exc_info=True)
        document = create_exception_response(e)
        exit_code = 1

    print(render_response(document))
    return exit_code


if __name__ == '__main__':
    sys.exit(main())
