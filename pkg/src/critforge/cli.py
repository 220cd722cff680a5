"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration problems, 3 for stage failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import ConfigInvalid, load_config
from .gateway import BackendError, MockScriptError
from .pipeline import PipelineError, run_pipeline, run_stages
from .pooling import InsufficientItems, UnclassifiedSolution

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

# CLI verb -> internal stage name
_STAGE_VERBS = {
    "ingest": "ingest", "classify": "classify", "pool": "pool", "pair": "pair",
    "critic": "critic", "validate": "validate", "export-sft": "export",
    "eval": "eval", "report": "report",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="critforge",
        description="Synthesize, validate, and export critique training data "
                    "for step-by-step math solutions, and score critic models.",
    )
    parser.add_argument("--config", required=True, help="path to the YAML run config")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for verb in ("ingest", "classify", "pool", "pair", "validate", "report"):
        sub.add_parser(verb, help=f"run the {verb} stage")

    p_critic = sub.add_parser("critic", help="run the critique-synthesis stage")
    p_critic.add_argument("--mode", choices=("direct", "bug", "contrastive"),
                          help="override the configured critic mechanism")

    sub.add_parser("export-sft", help="export accepted critiques as SFT rows")

    p_eval = sub.add_parser("eval", help="score the critic on held-out records")
    p_eval.add_argument("--protocol", choices=("cc", "ei"),
                        help="override the configured scoring protocol")

    p_run = sub.add_parser("run", help="run the full pipeline for one round")
    p_run.add_argument("--round", type=int, help="override the configured round number")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        if args.command == "run":
            if args.round is not None:
                if args.round < 1:
                    raise ConfigInvalid("--round must be >= 1")
                config.round = args.round
            results = run_pipeline(config)
        else:
            if args.command == "critic" and args.mode:
                config.critic_mode = args.mode
            if args.command == "eval" and args.protocol:
                config.eval_protocol = args.protocol
            stage = _STAGE_VERBS[args.command]
            results = run_stages(config, [stage])
    except ConfigInvalid as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (PipelineError, BackendError, MockScriptError,
            InsufficientItems, UnclassifiedSolution) as exc:
        logger.error("stage failed: %s", exc)
        return EXIT_STAGE
    for stage, counts in results.items():
        logger.info("stage %s done: %s", stage, counts)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
