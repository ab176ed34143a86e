"""Command-line front end: dataset generation, training, evaluation,
attention benchmarking, and gradient audits."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .bench import bench_attention, summarize, write_csv
from .config import RunConfig, default_config_text, load_config
from .data import generate_dataset, load_dataset, save_dataset
from .errors import TwinsegError
from .evaluate import evaluate
from .gradcheck import run_gradcheck, tolerance_for
from .train import eval_dataset, load_model, train, train_dataset

_VARIANTS = {"original": "original", "pure-twin": "pure_twin", "hybrid-twin": "hybrid_twin"}


def _add_override_args(p: argparse.ArgumentParser):
    p.add_argument("--depth", type=int, help="encoder layer count override")
    p.add_argument("--variant", choices=sorted(_VARIANTS), help="encoder layer design override")
    p.add_argument("--substitute", choices=["none", "p5", "p4p5"], help="pyramid level substitution override")
    p.add_argument("--kernels", choices=["dynamic", "static"], help="mask kernel mode override")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--iterations", type=int, help="training iteration override")


def _load_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {}
    if getattr(args, "depth", None) is not None:
        updates["depth"] = args.depth
    if getattr(args, "variant", None) is not None:
        updates["variant"] = _VARIANTS[args.variant]
    if getattr(args, "substitute", None) is not None:
        updates["substitute"] = args.substitute
    if getattr(args, "kernels", None) is not None:
        updates["kernels"] = args.kernels
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        updates["iterations"] = args.iterations
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _cmd_generate(args) -> int:
    cfg = _load_config(args)
    if args.split == "train":
        samples = train_dataset(cfg)
    elif args.split == "eval":
        samples = eval_dataset(cfg)
    else:
        samples = generate_dataset(args.count or cfg.train_samples, cfg.image_h, cfg.image_w,
                                   cfg.max_objects, cfg.classes, cfg.seed)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train(cfg, args.workdir, resume=args.resume)
    status = "aborted (non-finite loss)" if result.aborted else "done"
    print(f"training {status}: {result.iterations_run} iterations, "
          f"first loss {result.first_loss:.4f}, final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 1 if result.aborted else 0


def _cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    model, cfg, meta = load_model(args.checkpoint, cfg)
    samples = load_dataset(args.dataset) if args.dataset else eval_dataset(cfg)
    metrics = evaluate(model, samples, cfg, dump_path=args.dump_instances)
    record = {"checkpoint": args.checkpoint, "iteration": meta.get("iteration"),
              "samples": len(samples), **metrics}
    line = json.dumps(record)
    if args.out:
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    print(line)
    return 0


def _cmd_bench(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(","))
    rows = bench_attention(sizes=sizes, channels=args.channels, heads=args.heads,
                           runs=args.runs, rectangular=not args.square_only, seed=args.seed or 0)
    if args.out:
        write_csv(rows, args.out)
        print(f"wrote {len(rows)} rows to {args.out}")
    for line in summarize(rows):
        print(line)
    return 0


def _cmd_gradcheck(args) -> int:
    dtype = np.float32 if args.bits == 32 else np.float64
    only = [s for s in (args.only.split(",") if args.only else []) if s]
    results = run_gradcheck(only=only or None, seed=args.seed or 0, dtype=dtype)
    tol = tolerance_for(dtype)
    failed = []
    for name in sorted(results):
        ok = results[name] < tol
        print(f"{'PASS' if ok else 'FAIL'} {name:24s} max rel err {results[name]:.3e} (tol {tol:g})")
        if not ok:
            failed.append(name)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def _cmd_print_config(args) -> int:
    print(default_config_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twinseg",
                                     description="grid-based instance segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset file")
    p.add_argument("--config", help="config file path")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--count", type=int, help="sample count (defaults to train_samples)")
    p.add_argument("--split", choices=["train", "eval", "custom"], default="custom")
    _add_override_args(p)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train", help="train on the synthetic train split")
    p.add_argument("--config", help="config file path")
    p.add_argument("--workdir", required=True, help="directory for checkpoint and logs")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_override_args(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config file (defaults to the one stored in the checkpoint)")
    p.add_argument("--dataset", help="dataset file (defaults to the generated eval split)")
    p.add_argument("--out", help="append metrics as a JSON line to this file")
    p.add_argument("--dump-instances", help="write per-image instance manifests (JSONL)")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("bench", help="attention cost benchmark")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--sizes", default="4,8,16,32")
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--square-only", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--only", help="comma-separated check names (default: all)")
    p.add_argument("--seed", type=int)
    p.add_argument("--bits", type=int, choices=[32, 64], default=64)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("print-config", help="print the default config")
    p.set_defaults(fn=_cmd_print_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except TwinsegError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
