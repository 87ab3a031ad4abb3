import argparse
import logging
import sys
import traceback

from . import __version__
from .config import EXPERIMENT_KINDS, RunConfig
from .errors import ConfigError, NmsLeakError
from .experiments import ExperimentRunner
from .logger import logger, nmsleak_logger

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECKS = 4

KIND_HELP = {
    'profile': "Runtime vs boxes per object and vs object count, with the phase breakdown.",
    'amplify-sweep': "Leakage correlation for each amplification factor k, over several seeds.",
    'calibrate': "Fit the neural-runtime model on black rasters and check the NMS-time estimates.",
    'evade': "Timing-guided evasion attack over a set of gadgets.",
    'evade-baseline': "Timing attack against the decision-only baseline on equal query budgets.",
    'lambda-sweep': "Evasion budget as a function of the step size.",
    'infer-dataset': "End-to-end dataset inference from NMS runtimes.",
    'fp-bound-curve': "False-positive bound vs target-set size, with a Monte Carlo check.",
    'countermeasure-eval': "Leakage of greedy, constant-time and random-delay NMS.",
    'serve': "Serve the synthetic detector over HTTP until interrupted.",
}


# Ensure uncaught exceptions are logged with full tracebacks
def _log_uncaught_exceptions(exctype, value, tb):
    try:
        logger.exception("Uncaught exception", exc_info=(exctype, value, tb))
    finally:
        traceback.print_exception(exctype, value, tb, file=sys.stderr)


sys.excepthook = _log_uncaught_exceptions


def parse_args(argv=None):
    parser = argparse.ArgumentParser(prog='nmsleak',
                                     description="Timing side-channel experiments against NMS in object detectors.")
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='kind', metavar='EXPERIMENT', required=True)

    for kind in EXPERIMENT_KINDS:
        sub = subparsers.add_parser(kind, help=KIND_HELP[kind], description=KIND_HELP[kind])
        sub.add_argument('-c', '--config', help="YAML file merged over the packaged defaults.")
        sub.add_argument('-s', '--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help="Override one setting, e.g. --set experiments.evade.gadgets=10 (repeatable).")
        sub.add_argument('--seed', type=int, default=None, help="Master seed (overrides the config file).")
        sub.add_argument('-o', '--out', default=None,
                         help="Run directory (default: $RUN_DIR/<experiment>-<seed>, RUN_DIR defaults to 'runs').")
        sub.add_argument('--plots', action='store_true', default=False, help="Render figures into <run>/plots.")
        sub.add_argument('-v', '--verbose', action='store_true', default=False, help="Enable verbose output.")

    return parser.parse_args(argv)


def main(argv=None):

    print(r'''
 _ __  _ __ ___  ___| | ___  __ _| | __
| '_ \| '_ ` _ \/ __| |/ _ \/ _` | |/ /
| | | | | | | | \__ \ |  __/ (_| |   <
|_| |_|_| |_| |_|___/_|\___|\__,_|_|\_\
    ''')

    args = parse_args(argv)
    if args.verbose:
        nmsleak_logger.set_level(logging.DEBUG)
        nmsleak_logger.set_console_level(logging.DEBUG)

    try:
        run_config = RunConfig.from_sources(args.kind, args.config, args.overrides, args.seed, args.out)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    print(f'Running {args.kind} into {run_config.output_dir}...')
    try:
        summary = ExperimentRunner(run_config, plots=args.plots).execute()
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NmsLeakError, OSError, ValueError) as e:
        print(f"Error: {e} (see {run_config.output_dir / 'FAILED'})", file=sys.stderr)
        return EXIT_RUNTIME

    checks = summary.get('checks') or {}
    failed = sorted(name for name, ok in checks.items() if not ok)
    for name, ok in sorted(checks.items()):
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    print(f'Done. Outputs in {run_config.output_dir}')
    if failed:
        logger.warning(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECKS
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
