"""
Command-line entry point for the RGBA lab.

    rgba-lab [--config PATH] [--set key=value ...] <command> [options]

Commands: gen-dataset, train, sample, eval, ablate.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from src.cli.commands import PHASES, cmd_ablate, cmd_eval, cmd_gen_dataset, cmd_sample, cmd_train
from src.cli.experiment import load_experiment_config
from src.utils.exceptions import LabError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgba-lab",
        description="Joint RGB and alpha video generation with a small diffusion transformer.",
    )
    parser.add_argument("--config", type=Path, help="Experiment YAML (defaults to settings.config_path)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config value, e.g. --set sampler.steps=25",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-dataset", help="Render the synthetic RGBA scene dataset")

    train = commands.add_parser("train", help="Pretrain the base model or fine-tune it for RGBA")
    train.add_argument("--phase", choices=PHASES, required=True)

    sample = commands.add_parser("sample", help="Sample RGBA videos from a checkpoint")
    sample.add_argument("--checkpoint", type=Path)
    sample.add_argument("--cond-id", dest="cond_ids", type=int, action="append")
    sample.add_argument("--seed", type=int)
    sample.add_argument("--steps", type=int)
    sample.add_argument("--coarse-steps", type=int)
    sample.add_argument("--out", type=Path)

    evaluate = commands.add_parser("eval", help="Score sampled videos")
    evaluate.add_argument("paths", nargs="*", type=Path)

    ablate = commands.add_parser("ablate", help="Run the mask and design ablation matrix")
    ablate.add_argument("--workers", type=int)
    return parser


def run(args: argparse.Namespace):
    config = load_experiment_config(str(args.config) if args.config else None, args.overrides)
    if args.command == "gen-dataset":
        return {"dataset": str(cmd_gen_dataset(config))}
    if args.command == "train":
        return cmd_train(config, args.phase)
    if args.command == "sample":
        return cmd_sample(
            config,
            checkpoint=args.checkpoint,
            cond_ids=args.cond_ids,
            seed=args.seed,
            steps=args.steps,
            coarse_steps=args.coarse_steps,
            out_dir=args.out,
        )
    if args.command == "eval":
        record = cmd_eval(config, args.paths or None)
        return record["aggregate"]
    return cmd_ablate(config, args.workers)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except LabError as e:
        logger.error(f"{args.command} failed: {e}")
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
