"""Command-line entry point: ``python3 -m chunkflow <subcommand> [options]``.

Exit codes: 0 success, 2 invalid configuration, 3 failure during the run (the
run directory keeps its partial artifacts plus a ``FAILED`` marker).
"""

from __future__ import annotations

import argparse
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .config import load_config, validate
from .distill import MODES
from .errors import ChunkflowError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (merged over defaults)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. distill.steps=200 (repeatable)")
    common.add_argument("--out", type=Path, required=True, help="run directory")
    common.add_argument("--seed", type=int, help="global seed (propagated to every seeded section)")
    common.add_argument("--strict", action="store_true", help="refuse checkpoints whose config hash differs")

    parser = argparse.ArgumentParser(prog="chunkflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic clip corpus")
    p = sub.add_parser("filter-corpus", parents=[common], help="dedup, filter and tuple a corpus")
    p.add_argument("--corpus", type=Path, required=True, help="run directory of gen-data")
    sub.add_parser("train-teacher", parents=[common], help="pre-train and freeze the teacher")
    p = sub.add_parser("distill", parents=[common], help="distill a few-step student")
    p.add_argument("--mode", choices=MODES, help="conditioning topology (overrides distill.mode)")
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p = sub.add_parser("rollout", parents=[common], help="generate a long sequence")
    p.add_argument("--student", type=Path, required=True)
    p.add_argument("--oracle", type=int, default=0, help="evaluation oracle index providing audio and identity")
    p = sub.add_parser("eval", parents=[common], help="drift curves (+ throughput when --teacher is given)")
    p.add_argument("--student", type=Path, required=True)
    p.add_argument("--teacher", type=Path)
    sub.add_parser("ablate", parents=[common], help="TRE/ETR x AKD grid plus the three distillation modes")
    return parser


def dispatch(args, cfg, out: Path) -> dict:
    cmd = args.command
    if cmd == "gen-data":
        return ex.gen_data(cfg, out)
    if cmd == "filter-corpus":
        return ex.filter_corpus(cfg, out, args.corpus)
    if cmd == "train-teacher":
        return ex.train(cfg, out)
    if cmd == "distill":
        teacher = ex.load_model(args.teacher, cfg, args.strict, role="teacher")
        return ex.run_distill(cfg, out, teacher)
    if cmd == "rollout":
        student = ex.load_model(args.student, cfg, args.strict, role="student")
        return ex.run_rollout(cfg, out, student, args.oracle)
    if cmd == "eval":
        student = ex.load_model(args.student, cfg, args.strict, role="student")
        teacher = ex.load_model(args.teacher, cfg, args.strict, role="teacher") if args.teacher else None
        return ex.evaluate(cfg, out, student, teacher)
    if cmd == "ablate":
        return ex.ablate(cfg, out)
    raise ChunkflowError("config-invalid", f"unknown command {cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
        if getattr(args, "mode", None):
            cfg = validate(replace(cfg, distill=replace(cfg.distill, mode=args.mode)))
    except ChunkflowError as err:
        print(f"config invalid: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    ex.snapshot(cfg, out)
    try:
        summary = dispatch(args, cfg, out)
    except Exception as err:  # noqa: BLE001 - any failure must leave a marker behind
        (out / "FAILED").write_text(f"{type(err).__name__}: {err}\n\n{traceback.format_exc()}")
        ex.run_manifest(args.command, cfg, out, {"error": str(err)}, status="failed")
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    ex.run_manifest(args.command, cfg, out, summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
