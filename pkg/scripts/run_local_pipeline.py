#!/usr/bin/env python3
"""
Run every CLI stage end to end on the shipped sample scenario.

    python scripts/run_local_pipeline.py [--method adaptive] [--out-dir out/sample]
        [--cross-validate] [--ablation]

Each stage goes through ``app.main`` exactly as it would from the shell, so
the printed documents are the real CLI output.
"""

import argparse
import os
import sys

current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
src_dir = os.path.join(parent_dir, 'src')
sys.path.insert(0, src_dir)

SAMPLE_CONFIG = os.path.join(parent_dir, 'data', 'sample_config.json')
SENSITIVITIES = ('4h', '8h', '12h', '1d', '2d', '1w')


def setup_environment():
    os.environ.setdefault('LOG_LEVEL', 'WARNING')
    os.environ.setdefault('URBANPULSE_THREADS', '4')


def stage_commands(method, out_dir, cross_validate=False, ablation=False):
    common = ['--config', SAMPLE_CONFIG, '--method', method, '--out-dir', out_dir]
    commands = [['synth'] + common, ['train'] + common, ['calibrate'] + common, ['detect'] + common]
    commands += [['evaluate', '--sensitivity', s] + common for s in SENSITIVITIES]
    commands += [['pr-curve'] + common, ['export-map'] + common]
    if cross_validate:
        commands.append(['cross-validate'] + common)
    if ablation:
        commands.append(['ablation'] + common)
    return commands


def main():
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument('--method', default='signature', choices=('signature', 'adaptive'))
    parser.add_argument('--out-dir', default=os.path.join(parent_dir, 'out', 'sample'))
    parser.add_argument('--cross-validate', action='store_true',
                        help='also run every fold and pool the reports')
    parser.add_argument('--ablation', action='store_true',
                        help='also compare PR curves across service subsets')
    args = parser.parse_args()

    setup_environment()
    from app import main as cli_main

    for argv in stage_commands(args.method, args.out_dir, args.cross_validate, args.ablation):
        print(f"\n$ urbanpulse {' '.join(argv)}")
        code = cli_main(argv)
        if code != 0:
            print(f"stage {argv[0]} failed with exit code {code}")
            return code
    print(f"\nartifacts in {args.out_dir}")
    return 0


if __name__ == '__main__':
    sys.exit(main())
