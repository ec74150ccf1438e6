"""Command line entry point: ``stvflow run <config-file>``.

Exit status is 0 when every property check of the study passes, 1 when a
check fails or a sample errors, and 2 for unusable input.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError
from .harness import WORKERS_ENV, load_config, run, verify_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stvflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="execute a study described by a configuration file")
    p.add_argument("config", nargs="?", help="key = value configuration file")
    p.add_argument("--output-dir", help="directory for CSV, summary and manifest (overrides output_dir)")
    p.add_argument("--workers", type=int, help=f"parallel samples (default ${WORKERS_ENV} or 1)")
    p.add_argument("--seed-base", type=int, help="first seed (overrides seed_base)")
    p.add_argument(
        "--verify-only",
        metavar="MANIFEST",
        help="rerun the configuration stored in MANIFEST and compare output hashes",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verify_only:
            same, mismatches = verify_manifest(args.verify_only, args.output_dir, args.workers)
            if same:
                print("outputs reproduced: all CSV hashes match")
                return 0
            print("outputs differ:", ", ".join(mismatches), file=sys.stderr)
            return 1
        if not args.config:
            print("stvflow run: a config file or --verify-only MANIFEST is required", file=sys.stderr)
            return 2
        cfg = load_config(args.config)
        manifest = run(cfg, output_dir=args.output_dir, workers=args.workers, seed_base=args.seed_base)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"stvflow: {exc}", file=sys.stderr)
        return 2
    for name, ok in manifest.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    for err in manifest.errors:
        print(f"ERROR {err}", file=sys.stderr)
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
