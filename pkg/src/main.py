#!/usr/bin/env python3
"""condense-moe command-line application."""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from core.errors import CondenseMoEError
from core.settings import load_run_config
from pipeline.stages import STAGE_FUNCTIONS, paths_for

logger = logging.getLogger("condense_moe")

# (flag, settings key, type, help) per subcommand
OVERRIDES = {
    "pretrain": [
        ("--steps", "pretrain.steps", int, "optimizer steps"),
        ("--lr", "pretrain.learning_rate", float, "peak learning rate"),
        ("--corpus-size", "data.corpus_size", int, "documents in the general corpus"),
    ],
    "calibrate": [
        ("--count", "calibration.count", int, "calibration sequences"),
        ("--max-seq-len", "calibration.max_seq_len", int, "truncation length"),
        ("--source", "calibration.source", str, "general or task"),
    ],
    "select-experts": [
        (
            "--method",
            "selection.expert_method",
            str,
            "greedy, random, l1, alpha_hill, layer_trim, block_trim",
        ),
        ("--keep", "selection.experts_per_condensed_layer", int, "routed experts kept per layer"),
        ("--metric", "selection.expert_metric", str, "js or kl"),
    ],
    "select-layers": [
        (
            "--method",
            "selection.layer_method",
            str,
            "greedy, layer_rank, global_layer_rank, block_influence, random",
        ),
        ("--k-layers", "selection.k_layers", int, "number of layers to condense"),
        ("--metric", "selection.metric", str, "js, kl or ppl"),
    ],
    "sft": [
        ("--steps", "sft.steps", int, "optimizer steps"),
        ("--lr", "sft.learning_rate", float, "peak learning rate"),
    ],
    "eval": [],
    "condense": [
        ("--keep", "selection.experts_per_condensed_layer", int, "routed experts kept per layer"),
    ],
    "sweep": [],
    "report": [],
    "pipeline": [
        ("--k-layers", "selection.k_layers", int, "number of layers to condense"),
        ("--keep", "selection.experts_per_condensed_layer", int, "routed experts kept per layer"),
        ("--expert-method", "selection.expert_method", str, "expert selector"),
        ("--layer-method", "selection.layer_method", str, "layer selector"),
        ("--metric", "selection.metric", str, "layer selection metric"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser with one subparser per stage."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'section.key = value' file (or JSON)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", help="run output directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument(
        "--allow-inactive",
        action="store_true",
        default=None,
        help="give never-activated kept experts the 1/N fixed gate instead of failing",
    )

    parser = argparse.ArgumentParser(
        prog="condense-moe", description="Condense MoE layers of a toy model into dense layers."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, options in OVERRIDES.items():
        sub = subparsers.add_parser(command, parents=[common])
        for flag, key, kind, text in options:
            sub.add_argument(flag, dest=key, type=kind, help=text)
        if command == "eval":
            sub.add_argument(
                "--checkpoint", choices=("pretrained", "condensed", "sft"), default="pretrained"
            )
            sub.add_argument("--measure-throughput", action="store_true", default=None)
        if command == "sft":
            sub.add_argument(
                "--freeze-gates", action="store_true", help="keep the fixed gates frozen"
            )
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Settings overrides from the parsed command-line flags."""
    overrides = {key: value for key, value in vars(args).items() if "." in key}
    overrides["run.seed"] = args.seed
    overrides["run.out"] = args.out
    overrides["selection.allow_inactive_experts"] = args.allow_inactive
    if getattr(args, "measure_throughput", None):
        overrides["run.measure_throughput"] = True
    if getattr(args, "freeze_gates", False):
        overrides["sft.train_fixed_gates"] = False
    return overrides


def setup_logging(verbose: bool):
    """Configure root logging once; ``verbose`` switches to DEBUG."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def failure_line(code: int, error: BaseException) -> str:
    """Machine-parsable failure line written to stderr."""
    return f"error: code={code} kind={type(error).__name__} message={json.dumps(str(error))}"


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        config = load_run_config(args.config, collect_overrides(args))
        paths = paths_for(config)
        stage = STAGE_FUNCTIONS[args.command]
        if args.command == "eval":
            stage(config, paths, args.checkpoint, progress_callback=logger.info)
        else:
            stage(config, paths, progress_callback=logger.info)
    except CondenseMoEError as e:
        print(failure_line(e.exit_code, e), file=sys.stderr)
        return e.exit_code
    except Exception as e:  # pylint: disable=broad-except
        logger.exception("unexpected failure")
        print(failure_line(1, e), file=sys.stderr)
        return 1
    return 0


def main():
    """Command-line entry point; exits with the code of ``run``."""
    sys.exit(run())


if __name__ == "__main__":
    main()
