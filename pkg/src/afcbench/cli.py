"""Subcommand front-end: afc, rewrite, validate, evaluate, analyze, report, run-all.

Exit codes: 0 ok, 1 config error, 2 runtime error. Soft flags (unparseable
outputs, leakage warnings) never fail a run; they show up in the summary
counts instead.
"""

from __future__ import annotations

import argparse
import logging
import sys

from afcbench.config import ConfigError, build_gateway, load_config
from afcbench.corpus import DatasetError
from afcbench.gateway import GatewayError
from afcbench.pipeline import STAGE_ORDER, STAGES, PipelineError, run_all

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="afcbench",
        description="Rewrite benchmark questions with answer-free context and evaluate the six-condition matrix.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="stage", required=True)
    for stage in (*STAGE_ORDER, "run-all"):
        sub = subparsers.add_parser(stage, help=f"run the {stage} stage")
        sub.add_argument("--config", required=True, help="run configuration JSON file")
        sub.add_argument("--dataset", action="append", help="dataset JSONL path (overrides config; repeatable)")
        sub.add_argument("--run-dir", help="run directory (overrides config)")
        sub.add_argument("--cache-dir", help="response cache directory (overrides config)")
        sub.add_argument("--limit", type=int, help="max records per dataset")
        sub.add_argument("--concurrency", type=int, help="max in-flight model requests")
        sub.add_argument("--condition", action="append", help="evaluation condition (repeatable)")
        sub.add_argument("--strict", action="store_true", default=None, help="fail on the first dataset load issue")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    overrides = {
        "datasets": args.dataset,
        "run_dir": args.run_dir,
        "cache_dir": args.cache_dir,
        "limit": args.limit,
        "concurrency": args.concurrency,
        "conditions": args.condition,
        "strict": args.strict,
    }
    try:
        config = load_config(args.config, overrides)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        gateway = build_gateway(config)
        if args.stage == "run-all":
            summaries = run_all(config, gateway)
        else:
            summaries = [STAGES[args.stage](config, gateway)]
    except (PipelineError, DatasetError, GatewayError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME

    status = EXIT_OK
    for summary in summaries:
        print(summary.describe())
        for artifact in summary.artifacts:
            print(f"  -> {artifact}")
        for message in summary.errors:
            print(f"  !! {message}", file=sys.stderr)
        if summary.failed:
            status = EXIT_RUNTIME
    return status


if __name__ == "__main__":
    sys.exit(main())
