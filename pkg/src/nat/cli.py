"""Command-line interface: train, eval, trace, gen, mix, check.

Exit codes: 0 success, 1 verification failure, 2 usage/config/data errors,
3 numeric failure during training. Errors print one machine-parseable line
to stderr, "error: <category>: <message>". Log verbosity comes from the
NAT_LOG environment variable (error, info, debug; default info).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .checks import run_all
from .config import ConfigError, parse_config
from .data import (DatasetError, SyntheticTaskSpec, gen_synthetic,
                   make_pairing, mix_dataset, MixSpec, read_dataset,
                   write_dataset, write_vocab)
from .evaluation import load_collapse_map, render_trace, score
from .network import CheckpointError, NumericError, load_checkpoint
from .numerics import Rng
from .training import TrainingAbort, load_episodes, train
from .transducer import greedy_decode, sample_trajectory

log = logging.getLogger("nat")

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_CATEGORY_EXIT = {
    "usage": EXIT_USAGE,
    "config": EXIT_USAGE,
    "data": EXIT_USAGE,
    "checkpoint": EXIT_USAGE,
    "check": EXIT_CHECK,
    "numeric": EXIT_NUMERIC,
}


def _fail(category: str, message: str) -> int:
    print(f"error: {category}: {message}", file=sys.stderr)
    return _CATEGORY_EXIT[category]


def _setup_logging() -> None:
    level = os.environ.get("NAT_LOG", "info").strip().lower()
    chosen = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}.get(level, logging.INFO)
    logging.basicConfig(level=chosen,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> "RunConfig":
    cfg = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    return cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    try:
        cfg = _load_config(args)
        result = train(cfg, cfg.out, resume=args.checkpoint,
                       threads=args.threads)
    except ConfigError as e:
        return _fail("config", str(e))
    except DatasetError as e:
        return _fail("data", str(e))
    except CheckpointError as e:
        return _fail("checkpoint", str(e))
    except TrainingAbort as e:
        kept = e.last_checkpoint if e.last_checkpoint else "none"
        return _fail("numeric", f"{e} (last good checkpoint: {kept})")
    print(f"trained {result.steps} steps")
    print(f"dev_per {result.dev_error_rate!r}")
    print(f"checkpoint {result.final_checkpoint}")
    print(f"metrics {result.metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = _load_config(args)
        params, _ = load_checkpoint(args.checkpoint)
        episodes = load_episodes(args.data, cfg.data.stack, params.vocab_size)
        collapse = (load_collapse_map(args.collapse, params.vocab_size)
                    if args.collapse else None)
    except ConfigError as e:
        return _fail("config", str(e))
    except DatasetError as e:
        return _fail("data", str(e))
    except (CheckpointError, FileNotFoundError) as e:
        return _fail("checkpoint", str(e))
    except ValueError as e:
        return _fail("data", str(e))
    refs = [ep.targets for _, ep in episodes]
    if args.self_check:
        hyps = [r.copy() for r in refs]
    else:
        hyps = [greedy_decode(params, ep.features).tokens
                for _, ep in episodes]
    report = score(hyps, refs, collapse=collapse)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write("id,edits,substitutions,insertions,deletions,"
                    "ref_tokens,error_rate\n")
            for (utt, _), hyp, ref in zip(episodes, hyps, refs):
                one = score([hyp], [ref], collapse=collapse)
                f.write(f"{utt.id},{one.total_edits},{one.substitutions},"
                        f"{one.insertions},{one.deletions},{one.ref_tokens},"
                        f"{one.error_rate!r}\n")
    print(f"per {report.error_rate!r}")
    print(f"substitutions {report.substitutions}")
    print(f"insertions {report.insertions}")
    print(f"deletions {report.deletions}")
    print(f"ref_tokens {report.ref_tokens}")
    if args.self_check and report.error_rate != 0.0:
        return _fail("check", "self-check expected error rate 0.0")
    return EXIT_OK


def cmd_trace(args) -> int:
    try:
        cfg = _load_config(args)
        params, _ = load_checkpoint(args.checkpoint)
        episodes = load_episodes(args.data, cfg.data.stack, params.vocab_size)
    except ConfigError as e:
        return _fail("config", str(e))
    except DatasetError as e:
        return _fail("data", str(e))
    except (CheckpointError, FileNotFoundError) as e:
        return _fail("checkpoint", str(e))
    except ValueError as e:
        return _fail("data", str(e))
    chosen = None
    if args.utterance is None:
        chosen = episodes[0]
    else:
        for utt, ep in episodes:
            if utt.id == args.utterance:
                chosen = (utt, ep)
                break
        if chosen is None:
            return _fail("data", f"utterance {args.utterance!r} not in {args.data}")
    utt, ep = chosen
    rng = Rng(cfg.seed if cfg.seed is not None else 0, 909)
    traj = sample_trajectory(params, ep, rng)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "emit_prob", "emitted"])
            for i in range(len(traj)):
                w.writerow([i + 1, repr(float(traj.emit_probs[i])),
                            int(traj.emissions[i])])
        print(f"wrote {args.out}")
    print(f"utterance {utt.id}")
    print(f"trace {render_trace(traj, args.chars_per_step)}")
    return EXIT_OK


def cmd_gen(args) -> int:
    try:
        task = SyntheticTaskSpec(
            vocab_size=args.vocab,
            tokens_per_utterance=(args.min_tokens, args.max_tokens),
            frames_per_token=(args.min_frames, args.max_frames),
            feature_dim=args.dim,
            noise_std=args.noise,
            seed=args.seed,
            stack_factor=args.stack_factor,
        )
        utts = gen_synthetic(task, args.count, start=args.skip)
        write_dataset(utts, args.out)
    except (ValueError, DatasetError) as e:
        return _fail("data", str(e))
    if args.vocab_file:
        symbols = ["<eos>"] + [f"t{i}" for i in range(1, args.vocab)]
        write_vocab(symbols, args.vocab_file)
        print(f"wrote {args.vocab_file}")
    print(f"wrote {args.out} ({len(utts)} utterances, dim {args.dim})")
    return EXIT_OK


def cmd_mix(args) -> int:
    try:
        primary = read_dataset(args.primary)
        secondary = read_dataset(args.secondary)
        out = []
        for r in range(args.pairs):
            pairing = make_pairing(primary, secondary, args.seed + r)
            spec = MixSpec(proportion=args.proportion, pairing=pairing)
            mixed = mix_dataset(primary, secondary, spec)
            if args.pairs > 1:
                for m in mixed:
                    m.id = f"{m.id}+mix{r}"
            out.extend(mixed)
        write_dataset(out, args.out)
    except DatasetError as e:
        return _fail("data", str(e))
    except ValueError as e:
        return _fail("data", str(e))
    print(f"wrote {args.out} ({len(out)} utterances, proportion "
          f"{args.proportion})")
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_all(seed=args.seed, fast=not args.full)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: {r.detail}")
        failed += 0 if r.passed else 1
    if failed:
        return _fail("check", f"{failed} of {len(results)} checks failed")
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="nat",
        description="Online neural transducer: train, evaluate, inspect.",
    )
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--checkpoint", default=None,
                   help="resume from this checkpoint")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for dev-set decoding")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None,
                   help="write a per-utterance report CSV here")
    p.add_argument("--collapse", default=None,
                   help="label collapse map file")
    p.add_argument("--self-check", action="store_true",
                   help="score references against themselves (must be 0)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="sample a trajectory and dump emissions")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--utterance", default=None,
                   help="utterance id (default: first in the dataset)")
    p.add_argument("--out", default=None, help="write step,emit_prob,emitted CSV here")
    p.add_argument("--chars-per-step", type=int, default=3,
                   help="input steps per rendered character")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--min-tokens", type=int, default=2)
    p.add_argument("--max-tokens", type=int, default=6)
    p.add_argument("--min-frames", type=int, default=2)
    p.add_argument("--max-frames", type=int, default=5)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--skip", type=int, default=0,
                   help="start at this utterance index; same seed with "
                        "disjoint index ranges shares token signatures "
                        "(train/dev splits)")
    p.add_argument("--stack-factor", type=int, default=1,
                   help="stacking the training run will apply")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-file", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("mix", help="overlay a confounder dataset")
    p.add_argument("--primary", required=True)
    p.add_argument("--secondary", required=True)
    p.add_argument("--proportion", type=float, required=True)
    p.add_argument("--pairs", type=int, default=1,
                   help="distinct pairings per primary utterance")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("check", help="run the verification battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true",
                   help="full sample sizes (slow)")
    p.set_defaults(func=cmd_check)
    return top


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except NumericError as e:
        return _fail("numeric", str(e))
    except KeyboardInterrupt:
        return _fail("usage", "interrupted")


if __name__ == "__main__":
    sys.exit(main())
