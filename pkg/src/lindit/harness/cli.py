"""``lindit`` command line: bench-attn, train, sample, quantize, caption-demo."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from lindit.errors import ConfigError, LinDiTError
from lindit.harness.config import TASKS, RunConfig, load_config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON; omitted keys take their defaults")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    parser = argparse.ArgumentParser(prog="lindit", description=__doc__)
    sub = parser.add_subparsers(dest="task", required=True, metavar="command")
    sub.add_parser("bench-attn", parents=[common], help="time attention variants against token count")
    sub.add_parser("train", parents=[common], help="train a tiny model on a toy dataset")
    p = sub.add_parser("sample", parents=[common], help="sample from a checkpoint or the Gaussian oracle")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true",
                   help="use the analytic Gaussian velocity (mu0=2, sigma0=0.5 unless set in the config)")
    p = sub.add_parser("quantize", parents=[common], help="W8A8-quantize a checkpoint and report fidelity")
    p.add_argument("--checkpoint")
    p = sub.add_parser("caption-demo", parents=[common], help="caption sampler frequencies vs probabilities")
    p.add_argument("--captions", help="NDJSON caption file")
    p.add_argument("--temperature", type=float, help="softmax temperature; 0 selects argmax")
    p.add_argument("--draws", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = dataclasses.replace(cfg, task=args.task)
    cfg = cfg.with_overrides(seed=args.seed, out=args.out)
    if getattr(args, "oracle", False) and cfg.sample.oracle is None:
        cfg = dataclasses.replace(cfg, sample=dataclasses.replace(
            cfg.sample, oracle={"kind": "gaussian", "mu0": 2.0, "sigma0": 0.5}))
    if args.task == "caption-demo":
        cap = cfg.captions.__class__(
            path=args.captions or cfg.captions.path,
            temperature=cfg.captions.temperature if args.temperature is None else args.temperature,
            draws=cfg.captions.draws if args.draws is None else args.draws)
        cfg = dataclasses.replace(cfg, captions=cap)
    return cfg


def main(argv=None) -> int:
    from lindit.harness.commands import run

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        if cfg.task not in TASKS:
            raise ConfigError(f"unknown command {cfg.task}")
        run(cfg, checkpoint=getattr(args, "checkpoint", None), captions=cfg.captions.path)
    except LinDiTError as exc:
        print(f"lindit {args.task}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(f"lindit {args.task}: wrote {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
