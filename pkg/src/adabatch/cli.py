"""Command-line entry point: ``adabatch {run,summarize,check}``."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import ConfigError, _override, parse_config, render_table, run_experiment, summarize, summarize_dir


def _cmd_run(args) -> int:
    try:
        spec = parse_config(args.config)
        spec = _override(spec, seeds=[args.seed] if args.seed is not None else None,
                         workers=args.workers, out_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    results = run_experiment(spec)
    done = [(r.variant, r.seed, r.metrics) for r in results if r.metrics is not None]
    if done:
        print(render_table(summarize(done)))
    failed = [r for r in results if r.error]
    for r in failed:
        print(f"run {r.variant} seed {r.seed} failed: {r.error}", file=sys.stderr)
    print(f"wrote {spec.out_dir}")
    return 1 if failed else 0


def _cmd_summarize(args) -> int:
    try:
        rows = summarize_dir(args.dir)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(render_table(rows))
    return 0


def _cmd_check(args) -> int:
    from .checks import run_checks
    return 0 if run_checks() else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="adabatch", description="Adaptive batch-size training simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every variant and seed of an experiment config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--workers", type=int, help="data-parallel size J for every variant")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("summarize", help="rebuild the summary table from metrics files")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_summarize)

    p = sub.add_parser("check", help="run the built-in oracle checks")
    p.set_defaults(func=_cmd_check)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
