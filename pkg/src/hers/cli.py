"""Command-line entry point for the staged pipeline.

Exit codes: 0 on success, 1 on usage errors, 2 on stage failures.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from hers.pipeline import (
    PipelineConfig,
    StageError,
    load_config,
    run_all,
    stage_eval,
    stage_merge,
    stage_pretrain,
    stage_prompts,
    stage_synth,
    stage_train,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; the pipeline contract
    # reserves 2 for stage failures, so usage errors map to 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="hers", description="Prompt bank, expert training, merging, and trust metrics.")
    parser.add_argument("--config", type=Path, help="JSON config file (defaults to the built-in config)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, help="artifact directory (defaults to the config's out_dir)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prompts", help="generate and filter the prompt bank")
    sub.add_parser("synth", help="draw the synthetic dataset from the bank")
    sub.add_parser("pretrain", help="train the shared base denoiser")
    train = sub.add_parser("train", help="train one domain expert")
    train.add_argument("--domain", required=True, help="domain label to train")
    sub.add_parser("merge", help="average the expert adapters")
    sub.add_parser("eval", help="compute metrics and write reports")
    sub.add_parser("run-all", help="run every stage in order")
    return parser


def _load(args) -> tuple[PipelineConfig, Path]:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig.default()
    if args.seed is not None:
        cfg = PipelineConfig.from_json_dict({**cfg.to_json_dict(), "seed": args.seed})
    out = args.out if args.out is not None else Path(cfg.out_dir)
    return cfg, out


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, out = _load(args)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"hers: config error: {exc}", file=sys.stderr)
        return 1

    started = time.perf_counter()
    try:
        if args.command == "prompts":
            path = stage_prompts(cfg, out)
        elif args.command == "synth":
            path = stage_synth(cfg, out)
        elif args.command == "pretrain":
            path = stage_pretrain(cfg, out)
        elif args.command == "train":
            path = stage_train(cfg, out, args.domain)
        elif args.command == "merge":
            path = stage_merge(cfg, out)
        elif args.command == "eval":
            path = stage_eval(cfg, out)
        else:
            path = run_all(cfg, out)
    except StageError as exc:
        print(f"hers: stage '{exc.stage}' failed: {exc}", file=sys.stderr)
        return 2
    elapsed = time.perf_counter() - started
    print(f"{args.command}: wrote {path} ({elapsed:.1f}s)")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
