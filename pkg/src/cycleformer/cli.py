"""Command line front end: train / eval / generate / sweep / retrofit.

Exit codes: 0 success; 2 bad usage, config or data; 3 training diverged;
4 unreadable or incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .adaptive import ExitPolicy, generate
from .checkpoint import load_model, save_model
from .config import RunConfig, load_run_config, model_config
from .data import ByteVocabulary, load_corpus, split_corpus
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)
from .evaluate import budget_sweep, evaluate, format_sweep
from .model import init_from_vanilla, param_count
from .train import MetricsWriter, plan_from_run, train

EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_CHECKPOINT = 4


def _policy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--threshold",
        default=None,
        help="zero-attention exit threshold; omit or 'none' for fixed full depth",
    )
    p.add_argument("--aggregation", choices=("mean", "last"), default="mean")


def _parse_threshold(raw) -> float | None:
    if raw is None or (isinstance(raw, str) and raw.lower() == "none"):
        return None
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"--threshold expects a number or 'none', got {raw!r}") from None


def _policy(args) -> ExitPolicy:
    return ExitPolicy(threshold=_parse_threshold(args.threshold), aggregation=args.aggregation)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cycleformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="key=value run config file")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--metrics", default=None, help="CSV metrics path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--data", default=None, help="corpus file (overrides corpus_path)")

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--max-batches", type=int, default=None)
    p.add_argument("--per-exit", action="store_true", help="print every exit, not just the last")
    _policy_args(p)

    p = sub.add_parser("generate", help="sample bytes from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    _policy_args(p)

    p = sub.add_parser("sweep", help="train every layout that fills a depth budget")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--variants", default="V,BC,HTC,ZTT")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="base run config for width and steps")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--valid-frac", type=float, default=0.1)

    p = sub.add_parser("retrofit", help="warm-start a cycled model from a vanilla checkpoint")
    p.add_argument("--ckpt", required=True, help="source checkpoint (variant V)")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("HTC", "ZTT"), default="ZTT")
    p.add_argument("--loop-count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_ids(path: str) -> np.ndarray:
    return load_corpus(path)


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.data is not None:
        rc = replace(rc, corpus_path=args.data)
    if rc.corpus_path is None:
        raise ConfigError("corpus_path is not set; add corpus_path=... or pass --data")
    ids = _load_ids(rc.corpus_path)
    cfg = model_config(rc)
    plan = plan_from_run(rc)
    params = None
    optimizer = None
    start = 0
    if args.resume:
        loaded = load_model(args.resume)
        if loaded.config != cfg:
            raise ConfigError(
                f"checkpoint {args.resume} was built for a different model shape"
            )
        params, optimizer, start = loaded.params, loaded.make_optimizer(), loaded.step
        if start >= plan.steps:
            print(f"nothing to do: checkpoint is at step {start} of {plan.steps}")
            return 0
    metrics = MetricsWriter(args.metrics, append=bool(args.resume)) if args.metrics else None
    try:
        result = train(
            cfg, plan, ids, params=params, optimizer=optimizer, start_step=start, metrics=metrics
        )
    finally:
        if metrics is not None:
            metrics.close()
    save_model(args.out, rc, result.params, result.optimizer)
    total = param_count(cfg)["total"]
    print(
        f"trained {rc.variant} ({total} params) for {result.steps_done - start} steps; "
        f"final loss {result.losses[-1]:.4f}; checkpoint -> {args.out}"
    )
    return 0


def cmd_eval(args) -> int:
    loaded = load_model(args.ckpt)
    ids = _load_ids(args.data)
    policy = _policy(args)
    report = evaluate(
        loaded.params, loaded.config, ids,
        policy=policy, batch=args.batch, max_batches=args.max_batches,
    )
    shown = report.exits if args.per_exit else report.exits[-1:]
    for e in shown:
        print(f"exit {e.exit_index}: loss {e.loss:.4f}  ppl {e.ppl:.2f}")
    if report.adaptive is not None:
        a = report.adaptive
        print(
            f"adaptive (threshold {a.threshold:g}, {policy.aggregation}): "
            f"loss {a.loss:.4f}  ppl {a.ppl:.2f}  avg_loop {a.avg_loop:.3f}"
        )
    for c in report.cycles:
        z = "" if c.zero_attn is None else f"  zero_attn {c.zero_attn:.4f}"
        g = "" if c.gate is None else f"  gate {c.gate:.4f}"
        print(f"cycle {c.cycle}:{z}{g}")
    print(f"tokens {report.n_tokens}  batches {report.n_batches}")
    return 0


def cmd_generate(args) -> int:
    loaded = load_model(args.ckpt)
    vocab = ByteVocabulary()
    prompt = vocab.encode(args.prompt.encode("utf-8"), add_bos=True)
    res = generate(
        loaded.params, loaded.config, prompt, args.max_tokens,
        policy=_policy(args), temperature=args.temperature, seed=args.seed,
    )
    sys.stdout.write(vocab.decode(res.ids).decode("utf-8", errors="replace"))
    sys.stdout.write("\n")
    print("cycles: " + " ".join(str(c) for c in res.cycles_used), file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    base = load_run_config(args.config) if args.config else RunConfig()
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("--variants is empty")
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    ids = _load_ids(args.data)
    train_ids, valid_ids = split_corpus(ids, args.valid_frac)
    rows = budget_sweep(args.budget, variants, train_ids, valid_ids, base, seeds=seeds)
    print(format_sweep(rows))
    return 0


def cmd_retrofit(args) -> int:
    loaded = load_model(args.ckpt)
    target_rc = replace(
        loaded.rc,
        variant=args.variant,
        loop_count=args.loop_count,
        use_gate=None,
        use_zero_token=None,
        share_middle=True,
    )
    target_cfg = model_config(target_rc)
    params = init_from_vanilla(loaded.params, target_cfg, seed=args.seed)
    save_model(args.out, target_rc, params)
    print(
        f"retrofitted {args.variant} x{args.loop_count} "
        f"({param_count(target_cfg)['total']} params) -> {args.out}"
    )
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "sweep": cmd_sweep,
    "retrofit": cmd_retrofit,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TrainingDiverged as e:
        print(f"error: training diverged at step {e.step} (loss {e.loss})", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, DataError, UsageError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
