"""Command-line entry point: ``activeshift {train,eval,gradcheck,oracle,bench,export-shifts}``.

Exit codes: 0 success, 1 invalid configuration, 2 unreadable dataset,
3 checkpoint does not match the network, 4 verification suite failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, verify
from .data import DatasetSpec, load_cifar
from .errors import ConfigError, FormatError, ShapeError, UsageError
from .models import NetworkConfig, build
from .nn import checkpoint
from .tensor import resolve_dtype, set_num_threads
from .train import RunConfig, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_SUITE = 0, 1, 2, 3, 4
INIT_CHOICES = ("grouped", "int-normal", "real-normal", "uniform")
METRICS_KEYS = (
    "dataset", "family", "depth", "width", "epsilon", "init_mode", "trainable_shift",
    "iterations", "test_top1", "test_top5", "params", "shift_params", "final_loss",
    "train_seconds", "test_curve", "seed",
)

log = logging.getLogger("activeshift")


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--precision", choices=("single", "double"), default="single")


def _data_args(p):
    p.add_argument("--data-root", help="CIFAR root directory (default: $ASL_DATA_ROOT)")
    p.add_argument("--dataset", choices=("cifar10", "cifar100"), default="cifar10")


def _network_config(args):
    cfg = NetworkConfig.load(args.config) if args.config else NetworkConfig()
    for flag, key in (("depth", "depth"), ("width", "width"), ("epsilon", "epsilon"), ("family", "family")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "init", None):
        cfg.init_mode = args.init
    if getattr(args, "freeze_shift", False):
        cfg.trainable = False
    if args.dataset == "cifar100" and cfg.classes == 10:
        cfg.classes = 100
    return cfg.validate()


def build_parser():
    parser = argparse.ArgumentParser(prog="activeshift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a CIFAR network")
    _common(p)
    _data_args(p)
    p.add_argument("--config", help="network config file (key = value lines)")
    p.add_argument("--family", choices=("asnet-cifar", "dw-baseline"))
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--epsilon", type=int)
    p.add_argument("--init", choices=INIT_CHOICES, help="shift initialization")
    p.add_argument("--freeze-shift", action="store_true", help="keep shift parameters fixed")
    p.add_argument("--iters", type=int, default=64000)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--schedule", choices=("step", "linear"), default="step")
    p.add_argument("--milestones", help="comma-separated lr drop iterations (default: 50%%,75%% of --iters)")
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--shift-lr", type=float, default=1e-2)
    p.add_argument("--shift-norm", choices=("layer", "pair"), default="layer")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--checkpoint-every", type=int, default=4000)
    p.add_argument("--eval-every", type=int, default=2000)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--metrics", default="metrics.json", help="where to write the final metrics json")
    p.add_argument("--train-limit", type=int, help="use only the first N training images")
    p.add_argument("--test-limit", type=int, help="use only the first N test images")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--prefetch", action="store_true", help="load batches in a background thread")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    _data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="network config (default: the one stored in the checkpoint)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    for name, helptext, func in (
        ("gradcheck", "finite-difference gradient suites", lambda a: cmd_suites(a, verify.gradcheck_suites)),
        ("oracle", "decomposition / collapse / adjointness oracle suites", lambda a: cmd_suites(a, verify.oracle_suites)),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="per-layer inference microbenchmarks")
    _common(p)
    p.add_argument("--layers", default=",".join(bench.LAYER_KINDS), help="comma-separated layer kinds")
    p.add_argument("--table1", action="store_true", help="all layers at 64 channels, 224x224")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--format", default="text", help="text, csv or json")
    p.add_argument("--output", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-shifts", help="dump per-layer (alpha, beta) pairs as csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", help="csv path (default: stdout)")
    p.set_defaults(func=cmd_export_shifts)
    return parser


def _load_data(args, split, limit=None, dtype=np.float32):
    spec = DatasetSpec(source=args.dataset, path=args.data_root, split=split, seed=args.seed)
    return load_cifar(spec, dtype=dtype, limit=limit)


def cmd_train(args):
    try:
        cfg = _network_config(args)
        dtype = resolve_dtype(args.precision)
        milestones = tuple(int(m) for m in args.milestones.split(",")) if args.milestones else None
        run = RunConfig(
            iterations=args.iters, batch_size=args.batch_size, lr=args.lr, schedule=args.schedule,
            milestones=milestones, momentum=args.momentum, weight_decay=args.weight_decay,
            shift_lr=args.shift_lr, shift_norm=args.shift_norm, checkpoint_dir=args.checkpoint_dir,
            checkpoint_every=args.checkpoint_every, eval_every=args.eval_every, log_every=args.log_every,
            seed=args.seed, augment=not args.no_augment, prefetch=args.prefetch,
        )
        if run.iterations < 0 or run.batch_size < 1:
            raise ConfigError("--iters must be >= 0 and --batch-size >= 1")
    except (ConfigError, ValueError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    try:
        train_data = _load_data(args, "train", args.train_limit, dtype)
        test_data = _load_data(args, "test", args.test_limit, dtype)
    except (OSError, FormatError) as exc:
        log.error("cannot read dataset: %s", exc)
        return EXIT_DATA

    net = build(cfg, seed=args.seed, dtype=dtype)
    meta = {"config": cfg.dumps(), "dataset": args.dataset, "precision": args.precision,
            "mean": train_data.mean.tolist(), "std": train_data.std.tolist()}
    log.info("network %s depth=%d width=%d eps=%d: %d parameters", cfg.family, cfg.depth, cfg.width,
             cfg.epsilon, net.num_parameters())
    try:
        result = train(net, train_data, test_data, run, resume=args.resume, meta=meta)
    except (ShapeError, FormatError) as exc:
        log.error("cannot resume from checkpoint: %s", exc)
        return EXIT_CHECKPOINT
    metrics = {
        "dataset": args.dataset, "family": cfg.family, "depth": cfg.depth, "width": cfg.width,
        "epsilon": cfg.epsilon, "init_mode": cfg.init_mode, "trainable_shift": cfg.trainable,
        "seed": args.seed, **{k: result[k] for k in METRICS_KEYS if k in result},
    }
    metrics = {k: metrics[k] for k in METRICS_KEYS}
    Path(args.metrics).write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"test top1 {metrics['test_top1']:.4f} params {metrics['params']}")
    return EXIT_OK


def cmd_eval(args):
    try:
        _, meta = checkpoint.read_checkpoint(args.checkpoint)
    except (OSError, FormatError) as exc:
        log.error("cannot read checkpoint: %s", exc)
        return EXIT_CHECKPOINT
    try:
        if args.config:
            cfg = NetworkConfig.load(args.config)
        elif "config" in meta:
            cfg = NetworkConfig.loads(meta["config"])
        else:
            raise ConfigError("checkpoint carries no network config; pass --config")
        dtype = resolve_dtype(args.precision)
    except (ConfigError, ValueError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    net = build(cfg, seed=args.seed, dtype=dtype)
    try:
        checkpoint.load(args.checkpoint, net)
    except ShapeError as exc:
        log.error("checkpoint does not match network: %s", exc)
        return EXIT_CHECKPOINT
    try:
        data = _load_data(args, args.split, args.limit, dtype)
    except (OSError, FormatError) as exc:
        log.error("cannot read dataset: %s", exc)
        return EXIT_DATA
    top1, top5 = evaluate(net, data)
    report = {"split": args.split, "examples": len(data), "top1": top1, "top5": top5}
    print(json.dumps(report))
    return EXIT_OK


def cmd_suites(args, suites):
    ok = True
    for result in suites(args.seed):
        print(result.line())
        ok &= result.passed
    return EXIT_OK if ok else EXIT_SUITE


def cmd_bench(args):
    if args.threads != 1:
        log.error("benchmarks run single-threaded only; got --threads %d", args.threads)
        return EXIT_CONFIG
    if args.format not in bench.FORMATS:
        log.error("unknown format %r; expected one of %s", args.format, ", ".join(bench.FORMATS))
        return EXIT_CONFIG
    dtype = resolve_dtype(args.precision)
    kinds = bench.TABLE1_KINDS if args.table1 else [k for k in args.layers.split(",") if k]
    channels, size = (64, 224) if args.table1 else (args.channels, args.size)
    try:
        records = [
            bench.bench_layer(k, channels, size, size, channels, args.reps, args.warmup, dtype, args.seed)
            for k in kinds
        ]
        text = bench.emit_report(records, args.format, bench.environment(dtype))
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_export_shifts(args):
    try:
        arrays, _ = checkpoint.read_checkpoint(args.checkpoint)
    except (OSError, FormatError) as exc:
        log.error("cannot read checkpoint: %s", exc)
        return EXIT_CHECKPOINT
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["layer", "channel", "alpha", "beta"])
        for name, arr in arrays.items():
            if name.startswith("param/") and name.endswith(".shift"):
                layer = name[len("param/"):-len(".shift")]
                for c, (a, b) in enumerate(arr):
                    writer.writerow([layer, c, repr(float(a)), repr(float(b))])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    set_num_threads(getattr(args, "threads", 1))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
