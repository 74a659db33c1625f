"""Command line for training, gradient checks, routing traces and sweeps.

Exit status is 0 on success, 1 when a check fails, 2 for invalid input and
3 when training diverges.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import NonFiniteError
from .gradcheck import SCOPES, TOLERANCE, grad_check
from .model import ModelConfig, PlacementMap
from .sweep import format_table, placement_base, sweep
from .tasks import TaskSpec
from .trace import load_model, parse_tokens, routing_trace, write_trace
from .train import TrainConfig, TrainingDiverged, greedy_accuracy, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_model_args(p: argparse.ArgumentParser, depth: int | None = 2) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--routing", choices=("none", "dynamic", "em"), default="em")
    g.add_argument("--placement", default="ed2,dec2", help="comma-separated sites such as enc1,dec2,ed2")
    g.add_argument("--d-model", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--capsules", type=int, default=4, help="output capsules per site (l)")
    g.add_argument("--iters", type=int, default=3, help="routing iterations")
    g.add_argument("--depth", type=int, default=depth)
    g.add_argument("--d-ff", type=int, default=128)
    g.add_argument("--max-len", type=int, default=64)


def _add_train_args(p: argparse.ArgumentParser, steps: int, batch_size: int | None = 64) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--task", choices=("copy", "reverse", "sort"), default="copy")
    g.add_argument("--vocab", type=int, default=20)
    g.add_argument("--min-len", type=int, default=1)
    g.add_argument("--seq-len", type=int, default=12, help="longest source sequence")
    g.add_argument("--steps", type=int, default=steps)
    g.add_argument("--batch-size", type=int, default=batch_size)
    g.add_argument("--lr", type=float, default=1.0, help="multiplier on the warmup schedule")
    g.add_argument("--warmup", type=int, default=400)
    g.add_argument("--smoothing", type=float, default=0.0, help="label smoothing")
    g.add_argument("--log-every", type=int, default=50)
    g.add_argument("--ckpt-every", type=int, default=500)
    g.add_argument("--eval-samples", type=int, default=256)
    g.add_argument("--target-acc", type=float, default=None, help="stop once held-out token accuracy reaches this")


def _train_config(args, seed: int) -> TrainConfig:
    model = ModelConfig(
        src_vocab=args.vocab,
        tgt_vocab=args.vocab,
        d_model=args.d_model,
        heads=args.heads,
        depth=args.depth,
        d_ff=args.d_ff,
        capsules=args.capsules,
        routing=args.routing,
        iterations=args.iters,
        placement=PlacementMap.parse(args.placement),
        max_len=args.max_len,
    )
    return TrainConfig(
        model=model,
        task=TaskSpec(args.task, args.vocab, args.min_len, args.seq_len),
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        warmup=args.warmup,
        smoothing=args.smoothing,
        seed=seed,
        log_every=args.log_every,
        ckpt_every=args.ckpt_every,
        eval_samples=args.eval_samples,
        target_acc=args.target_acc,
    )


def cmd_train(args) -> int:
    cfg = _train_config(args, args.seed)
    result = train(cfg, args.out, resume=args.resume)
    ev = result.eval
    print(
        f"step {result.step}: eval loss {ev['loss']:.4f} token_acc {ev['token_acc']:.4f} "
        f"seq_acc {ev['seq_acc']:.4f} ({result.wall_time:.1f}s)"
    )
    if args.greedy:
        print(f"greedy exact match {greedy_accuracy(result.model, cfg.task, cfg.seed, args.greedy):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for seed in args.seeds or [args.seed]:
        report = grad_check(args.scope, seed, routing_kind=args.routing, placement=args.placement)
        print(report.format(args.tol))
        ok &= report.ok(args.tol)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_trace(args) -> int:
    model = load_model(args.ckpt, args.config)
    target = parse_tokens(args.target) if args.target is not None else None
    trace = routing_trace(model, parse_tokens(args.input), args.site, target)
    text = write_trace(trace, args.out, args.format)
    if args.out:
        print(f"wrote {trace.iterations} iterations to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.depth is None:
        # the placement grid names layers up to 6
        args.depth = 6 if args.kind == "placement" else 2
    if args.batch_size is None:
        args.batch_size = placement_base().batch_size if args.kind == "placement" else 64
    base = _train_config(args, args.seeds[0])
    variants = args.variants.split(";") if args.variants else None
    rows = sweep(args.kind, base, args.seeds, variants, args.out)
    print(format_table(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a synthetic task")
    _add_model_args(p)
    _add_train_args(p, steps=5000)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.add_argument("--greedy", type=int, default=0, metavar="N", help="also report greedy exact match on N samples")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check (64-bit)")
    p.add_argument("--scope", choices=SCOPES, default="full")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds, overrides --seed")
    p.add_argument("--routing", choices=("none", "dynamic", "em"), default="em", help="routing for --scope full")
    p.add_argument("--placement", default="ed2,dec2", help="placement for --scope full")
    p.add_argument("--tol", type=float, default=TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("trace", help="export per-iteration routing state at one capsule site")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", default=None, help="key=value model config (default: config.txt next to the checkpoint)")
    p.add_argument("--site", required=True, help="e.g. dec2")
    p.add_argument("--input", required=True, help='source tokens, e.g. "5 7 3"')
    p.add_argument("--target", default=None, help="decoder tokens; greedy decode when omitted")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("csv", "jsonl"), default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("sweep", help="train placement or capsule-count variants")
    p.add_argument("--kind", choices=("placement", "capsule_count"), default="placement")
    p.add_argument("--seeds", type=_int_list, default=[1])
    p.add_argument("--variants", default=None, help="';'-separated list, e.g. 'dec2;ed2,dec2' or '2;4;8'")
    p.add_argument("--out", default=None)
    _add_model_args(p, depth=None)
    _add_train_args(p, steps=500, batch_size=None)
    p.set_defaults(func=cmd_sweep, log_every=100)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, NonFiniteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
