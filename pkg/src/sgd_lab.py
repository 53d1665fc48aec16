#!/usr/bin/env python3
"""
SGD Lab - CLI Entry Point

Runs config-driven experiments on stochastic learning dynamics in games:
- run: validate an experiment file, simulate, write CSV/JSON artifacts
- list: print the builtin game catalog

Exit codes: 0 success, 2 configuration error (nothing written),
3 numerical failure.
"""

import argparse
import json
from typing import List, Optional

from dotenv import load_dotenv

# Handle both relative and absolute imports
try:
    from .sgd_builtins import format_catalog, list_builtins
    from .sgd_config import load_config
    from .sgd_dynamics import NumericalFailureError
    from .sgd_experiments import ExperimentRunner
    from .sgd_regularization import MirrorConvergenceError
except ImportError:
    from sgd_builtins import format_catalog, list_builtins
    from sgd_config import load_config
    from sgd_dynamics import NumericalFailureError
    from sgd_experiments import ExperimentRunner
    from sgd_regularization import MirrorConvergenceError


EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='sgd-lab',
        description='Stochastic follow-the-regularized-leader experiments in finite games',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # List builtin games with payoff tensors
  sgd-lab list

  # Simulate Matching Pennies under noise and export the trajectory
  sgd-lab run configs/matching_pennies_simulate.conf

  # Hitting-time experiment with a different seed and more runs
  sgd-lab run configs/matching_pennies_hitting.conf --seed 7 --runs 500

  # Club faces of the Prisoner's Dilemma, written to a custom directory
  sgd-lab run configs/prisoners_dilemma_club.conf --out-dir ./club_output

  # Parallel Monte Carlo batches
  sgd-lab run configs/prisoners_dilemma_stability.conf --workers 4 --verbose
        """
    )
    subparsers = parser.add_subparsers(dest='command')

    run_parser = subparsers.add_parser('run', help='Run the experiment described by a config file')
    run_parser.add_argument('config', help='Experiment config (.conf sections or .json)')
    run_parser.add_argument('--seed', type=int, default=None, help='Override [sim] seed')
    run_parser.add_argument('--out-dir', default=None, help='Override the output directory')
    run_parser.add_argument('--runs', type=int, default=None, help='Override the experiment run count')
    run_parser.add_argument(
        '--workers',
        type=int,
        default=None,
        help='Threads for Monte Carlo batches (default: SGD_LAB_WORKERS or 1)'
    )
    run_parser.add_argument('--verbose', action='store_true', help='Print progress details')

    list_parser = subparsers.add_parser('list', help='List builtin games')
    list_parser.add_argument('--json', action='store_true', help='Print the catalog as JSON')
    return parser


def run_command(args) -> int:
    try:
        config = load_config(
            args.config,
            seed=args.seed,
            out_dir=args.out_dir,
            runs=args.runs,
            workers=args.workers,
        )
        runner = ExperimentRunner(config, verbose=args.verbose)
    except ValueError as e:
        print(f"Error: {e}")
        return EXIT_CONFIG_ERROR

    if args.verbose:
        print(f"Config: {config.source}")
        print(f"Experiment: {config.kind}")
        print(f"Seed: {config.seed}")
        print(f"Config hash: {config.config_hash()}")

    try:
        outcome = runner.run()
    except (NumericalFailureError, MirrorConvergenceError) as e:
        print(f"\n❌ Numerical failure: {e}")
        return EXIT_NUMERICAL_FAILURE
    except ValueError as e:
        print(f"\n❌ Experiment rejected: {e}")
        return EXIT_CONFIG_ERROR

    print(f"\n✅ {config.kind} finished ({len(outcome['files'])} file(s) in {config.output_dir})")
    for path in outcome['files']:
        print(f"  {path}")
    return EXIT_OK


def list_command(args) -> int:
    catalog = list_builtins()
    if args.json:
        print(json.dumps(catalog, indent=2))
    else:
        print(format_catalog(catalog))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""

    # Load environment variables
    load_dotenv()

    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == 'run':
        return run_command(args)
    if args.command == 'list':
        return list_command(args)

    parser.print_help()
    return EXIT_CONFIG_ERROR


if __name__ == '__main__':
    raise SystemExit(main())
