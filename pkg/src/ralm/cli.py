"""Command-line entry point: ``ralm <verb> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import CorpusError
from .encoders import EncoderError, load_checkpoint, save_checkpoint
from .harness import AXES, ConfigError, ExperimentConfig, emit_smoothed, ict_only, run_ablation, run_pretrain
from .synthetic import generate_synthetic_corpus
from .tensor import NumericalError
from .training import TrainingError, load_reader

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="toy", help="config file, or a bundled name (toy, planted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--no-retrieval", action="store_true")
    p.add_argument("--no-null", action="store_true")
    p.add_argument("--no-ict", action="store_true")
    p.add_argument("--k", type=int, help="candidates per query, null document included")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ralm", description="Retrieval-augmented masked LM training at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("pretrain", help="ICT warmup (optional) plus joint training")
    _add_run_flags(p)

    p = sub.add_parser("ablate", help="run every variant along one ablation axis")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, choices=AXES)

    p = sub.add_parser("ict-warmup", help="train the retrieval encoders with ICT only")
    _add_run_flags(p)

    p = sub.add_parser("extract-reader", help="write the reader alone from a run checkpoint")
    p.add_argument("--out", required=True, help="run directory holding checkpoint/params.ckpt")
    p.add_argument("--dest", help="output path (default: <out>/reader.ckpt)")

    p = sub.add_parser("gen-corpus", help="write a planted-knowledge synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-facts", type=int, default=64)
    p.add_argument("--num-fillers", type=int)
    p.add_argument("--chunk-len", type=int, default=53)
    p.add_argument("--chunks-per-article", type=int, default=2)
    p.add_argument("--person-per-chunk", action="store_true",
                   help="give every chunk index of a fact pair its own person")

    p = sub.add_parser("smooth", help="EMA-smooth a metrics CSV")
    p.add_argument("metrics_csv")
    p.add_argument("--alpha", type=float, default=0.99)
    p.add_argument("--out")
    return ap


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = str(Path(args.out).resolve())
    if args.steps is not None:
        changes["total_steps"] = args.steps
        changes["warmup_steps"] = min(cfg.warmup_steps, max(args.steps - 1, 0))
    if args.no_retrieval:
        changes["retrieval"] = False
    if args.no_null:
        changes["null_document"] = False
    if args.no_ict:
        changes["ict_warmup"] = False
    if args.k is not None:
        changes["k"] = args.k
    return cfg.replace(**changes) if changes else cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _dispatch(args: argparse.Namespace) -> int:
    if args.verb == "pretrain":
        _print(run_pretrain(config_from_args(args)).to_json())
    elif args.verb == "ablate":
        res = run_ablation(config_from_args(args), args.axis)
        _print({k: v.to_json() for k, v in res.items()})
    elif args.verb == "ict-warmup":
        _print(ict_only(config_from_args(args)))
    elif args.verb == "extract-reader":
        run = Path(args.out)
        src = run / "checkpoint" / "params.ckpt"
        if not src.exists():
            raise ConfigError(f"no checkpoint at {src}")
        groups, extra = load_checkpoint(src)
        dest = Path(args.dest) if args.dest else run / "reader.ckpt"
        save_checkpoint(dest, {"reader": groups["reader"]}, {"step": extra.get("step")})
        load_reader(dest)
        print(dest)
    elif args.verb == "gen-corpus":
        sc = generate_synthetic_corpus(
            args.num_facts, args.seed, args.out, args.num_fillers, args.chunk_len, args.chunks_per_article,
            args.person_per_chunk,
        )
        _print({"articles": len(sc.articles), "entities": len(sc.gazetteer), "out": args.out})
    elif args.verb == "smooth":
        print(emit_smoothed(args.metrics_csv, args.alpha, args.out))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CorpusError, EncoderError, TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
