"""Command-line front end: generate / split / train / eval / bench /
gradcheck / experiment.

Exit codes: 0 success, 1 validation error (bad flags, malformed inputs),
2 runtime failure.  Every random choice flows from an explicit ``--seed``
or a seed named in the experiment config.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .baskets import MiningSchedule
from .bench import run_bench, write_bench_csv
from .datasim import (
    gen_synthetic,
    load_baskets,
    save_baskets,
    single_basket,
    split_dataset,
    SplitSpec,
    to_labeled,
)
from .experiments import (
    EvalSpec,
    ExperimentConfig,
    StageError,
    evaluate_model,
    parse_probs,
    run_experiment,
    write_log_csv,
)
from .losses import LossConfig, Method
from .training import (
    OptimizerConfig,
    TrainConfig,
    TrainMode,
    grad_check,
    load_model,
    save_model,
    train,
)


def _loss_from_args(args) -> LossConfig:
    method = Method(args.loss)
    scale = args.s if args.s is not None else (
        16.0 if method in (Method.L2SOFTMAX, Method.NORMFACE, Method.COSFACE,
                           Method.ARCFACE) else 1.0)
    margin = args.m if args.m is not None else {
        Method.COSFACE: 0.1, Method.ARCFACE: 0.1,
        Method.LSOFTMAX: 2.0, Method.SPHEREFACE: 2.0,
    }.get(method, 0.0)
    return LossConfig(method, scale, margin, args.bias)


def _add_loss_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", default="cosface",
                   choices=[m.value for m in Method])
    p.add_argument("--s", type=float, default=None,
                   help="logit scale (default: 16 for scaled methods)")
    p.add_argument("--m", type=float, default=None,
                   help="margin (default: method-specific)")
    p.add_argument("--bias", action="store_true",
                   help="use a bias term (softmax/l2softmax only)")


def cmd_generate(args) -> None:
    data = gen_synthetic(args.classes, args.per_class, args.dim, args.spread,
                         args.seed)
    save_baskets(args.output, single_basket(data))
    print(f"wrote {args.classes} classes x {args.per_class} samples "
          f"to {args.output}")


def cmd_split(args) -> None:
    data = to_labeled(load_baskets(args.input))
    probs = parse_probs(args.probs, args.parts)
    baskets = split_dataset(data, SplitSpec(args.parts, probs, args.seed))
    save_baskets(args.output, baskets)
    sizes = [b.num_classes for b in baskets.baskets]
    print(f"split into {args.parts} baskets with class counts {sizes}")


def cmd_train(args) -> None:
    baskets = load_baskets(args.data)
    sched = MiningSchedule.uniform(args.tau, baskets.num_baskets, args.tr,
                                   args.epochs)
    config = TrainConfig(
        loss=_loss_from_args(args),
        mode=TrainMode(args.mode),
        sched=sched,
        optimizer=OptimizerConfig(args.lr, args.momentum, args.wd,
                                  tuple(args.lr_drops)),
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        shards=args.shards,
        hidden_dims=tuple(args.hidden),
        embed_dim=args.embed_dim,
    )
    result = train(config, baskets)
    save_model(args.out, result.params, result.classifier)
    if args.log:
        write_log_csv(args.log, result.log)
    final = result.log[-1]
    print(f"trained {args.mode} for {args.epochs} epochs; "
          f"final mean loss {final.mean_loss:.4f}; model -> {args.out}")


def cmd_eval(args) -> None:
    params, _clf = load_model(args.model)
    data = to_labeled(load_baskets(args.data))
    spec = EvalSpec(args.protocol, args.genuine, args.impostor,
                    tuple(args.far), args.queries_per_class, args.seed,
                    args.score)
    metrics = evaluate_model(params, data, spec)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(metrics))
        writer.writerow([f"{v:.6f}" for v in metrics.values()])
    print("  ".join(f"{k}={v:.4f}" for k, v in metrics.items()))


def cmd_bench(args) -> None:
    rows = run_bench(args.classes, args.shards, dim=args.dim,
                     batch=args.batch, steps=args.steps,
                     baskets=args.baskets, seed=args.seed)
    write_bench_csv(args.out, rows)
    print(f"bench table -> {args.out}")


def cmd_gradcheck(args) -> None:
    data = gen_synthetic(12, 3, 6, 0.2, args.seed)
    baskets = split_dataset(data, SplitSpec(2, (0.5, 0.5), args.seed + 1))
    sched = MiningSchedule.uniform(1, baskets.num_baskets, 2, 4)
    config = TrainConfig(
        loss=_loss_from_args(args),
        mode=TrainMode(args.mode),
        sched=sched,
        batch_size=4,
        epochs=4,
        seed=args.seed,
        hidden_dims=(6,),
        embed_dim=5,
    )
    report = grad_check(config, baskets, args.tolerance)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max relative error {report.max_rel_err:.3e} over "
          f"{report.num_params} parameters (tolerance {report.tolerance:g})")
    if not report.passed:
        raise RuntimeError("gradient check failed")


def cmd_experiment(args) -> None:
    config = ExperimentConfig.from_json(args.config)
    rows = run_experiment(config, out_dir=args.out)
    print(f"{len(rows)} summary rows -> "
          f"{Path(args.out or config.out_dir) / 'summary.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bbsoftmax",
        description="Train softmax-family losses over overlapping label "
                    "baskets with dynamic negative-class mining.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic labeled dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="split a dataset into baskets")
    p.add_argument("--input", required=True)
    p.add_argument("--parts", type=int, required=True)
    p.add_argument("--probs", required=True,
                   help="CSV probabilities, 'geometric', or 'overlap:R'")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a basket file")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True,
                   choices=[m.value for m in TrainMode])
    _add_loss_flags(p)
    p.add_argument("--tau", type=int, default=2)
    p.add_argument("--tr", type=int, default=2,
                   help="epochs between ignored-ratio drops")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-drops", type=int, nargs="*", default=[5, 10, 15])
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--wd", type=float, default=5e-4)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--hidden", type=int, nargs="*", default=[64])
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--log", default=None, help="per-epoch CSV log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a basket file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", default="pairs",
                   choices=["pairs", "retrieval", "both"])
    p.add_argument("--far", type=float, nargs="*", default=[1e-2, 1e-3])
    p.add_argument("--genuine", type=int, default=2000)
    p.add_argument("--impostor", type=int, default=2000)
    p.add_argument("--queries-per-class", type=int, default=2)
    p.add_argument("--score", default="cosine",
                   choices=["cosine", "euclidean"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="metrics CSV to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="serial vs sharded throughput table")
    p.add_argument("--classes", type=int, nargs="+", required=True)
    p.add_argument("--shards", type=int, nargs="+", required=True)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--baskets", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_loss_flags(p)
    p.add_argument("--mode", default="baseline1",
                   choices=[m.value for m in TrainMode])
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="run a JSON experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None,
                   help="output directory (overrides the config)")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are validation failures
        return 0 if exc.code == 0 else 1
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.__cause__, (ValueError, FileNotFoundError)) \
            else 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
