"""
Command-line interface for jump-diffusion simulation, estimation and LAN verification.
"""
import sys
import json
import logging
import argparse

from core.errors import ConfigError
from core.pipeline import (RunProcessor, STATUS_CONFIG, STATUS_OK, STATUS_RUNTIME, STATUS_TOLERANCE,
                           apply_overrides, load_run_config)

EXIT_CODES = {STATUS_OK: 0, STATUS_TOLERANCE: 1, STATUS_CONFIG: 2, STATUS_RUNTIME: 3}
COMMANDS = {
    "simulate": ("simulate", "Simulate one path and its latent jump record"),
    "fit": ("fit", "Quasi-maximum-likelihood (and optional Bayes) fit of a stored path"),
    "lan-verify": ("lan_verify", "Monte Carlo verification of the LAN expansion and estimator efficiency"),
    "density-diag": ("density_diag", "Density-approximation diagnostics along a rate schedule"),
}


def _u64(value):
    seed = int(value)
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return seed


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, required=True, help="Path to the JSON run configuration")
    common.add_argument("--out", type=str, default="out", help="Output directory")
    common.add_argument("--seed", type=_u64, default=None, help="Master seed; replaces 'seed' in the config")
    common.add_argument("--threads", type=int, default=None, help="Worker-pool size; replaces 'threads'")
    common.add_argument("--dry-run", action="store_true", help="Print the schedule and a runtime estimate only")
    common.add_argument("--verbose", action="store_true", help="Log progress at INFO level")

    parser = argparse.ArgumentParser(description="Simulate, estimate and verify LAN for discretely observed "
                                                 "jump-diffusions.")
    subparsers = parser.add_subparsers(dest="command")
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        if name in ("fit", "lan-verify"):
            sub.add_argument("--two-stage", action="store_true",
                             help="Fit sigma on the continuous branch first, then theta")
    return parser


def print_result(command, result):
    if result.get('dry_run'):
        print("\n" + "="*50)
        print(f"DRY RUN: {command.upper()}")
        print("="*50)
        summary = result['summary']
        for row in summary.get('schedule', []):
            print("  - " + ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        if 'admissible_rho' in summary:
            print(f"  - Admissible rho: {summary['admissible_rho']}")
        print(f"  - Config hash: {summary['config_hash']}")
        print(f"  - Estimated runtime: {summary['estimated_seconds']:.1f} s")
        return

    if result['success']:
        print("\n" + "="*50)
        print(f"{command.upper()} COMPLETED SUCCESSFULLY")
        print("="*50)
    else:
        print("\n" + "="*50)
        print(f"{command.upper()} FAILED")
        print("="*50)
        for error in result['errors']:
            print(f"✗ Error: {error}")

    for message in result.get('messages', []):
        print(f"✓ {message}")

    if result.get('files'):
        print(f"\nFiles created:")
        for file_type, file_path in result['files'].items():
            print(f"  - {file_type}: {file_path}")

    summary = result.get('summary')
    if summary and 'checks' in summary:
        print(f"\nChecks:")
        for name, passed in summary['checks'].items():
            print(f"  {'✓' if passed else '✗'} {name}")
    elif summary:
        print(f"\nSummary:")
        for key, value in summary.items():
            print(f"  - {key}: {value}")


def main(argv=None):
    """
    Main CLI entry point; returns the process exit code.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CODES[STATUS_CONFIG]

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    subcommand = COMMANDS[args.command][0]

    try:
        document = load_run_config(args.config)
        document = apply_overrides(document, seed=args.seed, threads=args.threads,
                                   two_stage=getattr(args, "two_stage", False))
    except ConfigError as e:
        print(f"✗ Config error: {e}")
        return EXIT_CODES[STATUS_CONFIG]

    try:
        processor = RunProcessor(progress_callback=None)  # CLI mode - progress shown by tqdm
        result = processor.run(subcommand, document, args.out, dry_run=args.dry_run)
    except Exception as e:
        print(f"Fatal error: {e}")
        return EXIT_CODES[STATUS_RUNTIME]

    print_result(args.command, result)
    if args.verbose and result.get('summary'):
        print(json.dumps(result['summary'], indent=2, sort_keys=True, default=str))
    return EXIT_CODES[result['status']]


if __name__ == "__main__":
    sys.exit(main())
