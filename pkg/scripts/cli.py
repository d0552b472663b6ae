"""
Command-line entry point.

    python -m scripts.cli run --config presets/linear1d.json [--out DIR] [--seed N] [--threads N]
    python -m scripts.cli presets
    python -m scripts.cli validate --config FILE

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .experiment import run_experiment, write_report
from .utils import ConfigError, setup_logging

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent.parent / 'presets'


def list_presets(directory=PRESET_DIR):
    """(name, experiment, comment) of every preset file, sorted by name."""
    out = []
    for path in sorted(Path(directory).glob('*.json')):
        raw = json.loads(path.read_text())
        out.append((path.stem, raw.get('experiment', ''), raw.get('comment', '')))
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog='python -m scripts.cli',
                                     description='Stochastic particle flow filtering experiments.')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    parser.add_argument('-q', '--quiet', action='store_true', help='Warnings only, no progress bar')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Run a Monte Carlo experiment')
    run.add_argument('--config', type=str, required=True, help='JSON experiment config')
    run.add_argument('--out', type=str, default=None, help='Output directory (overrides output.dir)')
    run.add_argument('--seed', type=int, default=None, help='Master seed (overrides seed)')
    run.add_argument('--threads', type=int, default=None,
                     help='Worker processes; $SPFLOW_THREADS or all cores by default')

    sub.add_parser('presets', help='List the built-in experiment configs')

    validate = sub.add_parser('validate', help='Check a config without running it')
    validate.add_argument('--config', type=str, required=True, help='JSON experiment config')
    return parser


def _run(args):
    config = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError('seed', f'must be >= 0, got {args.seed}')
        config = config.with_seed(args.seed)
    if args.out is not None:
        config = config.with_output_dir(args.out)
    report = run_experiment(config, threads=args.threads, progress=not args.quiet)
    csv_path, json_path = write_report(report, config)
    print(csv_path)
    print(json_path)


def _presets(args):
    for name, experiment, comment in list_presets():
        print(f'{name:<16} {experiment:<16} {comment}')


def _validate(args):
    config = load_config(args.config)
    print(f'{args.config}: ok ({config.experiment}, {len(config.filters)} filters, '
          f'{len(config.variants())} variants)')


COMMANDS = dict(run=_run, presets=_presets, validate=_validate)


def main(argv=None):
    """Parse `argv` and dispatch; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(-1 if args.quiet else (1 if args.verbose else 0))
    try:
        COMMANDS[args.command](args)
    except ConfigError as err:
        print(f'config error: {err}', file=sys.stderr)
        return 2
    except Exception as err:
        logger.debug('Run aborted', exc_info=True)
        print(f'error: {type(err).__name__}: {err}', file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
