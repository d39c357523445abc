"""Command-line front end: ``filterprune <verb> ...``.

Failures print ``error[<category>]: <message>`` on stderr and exit with the
category's code. ``FILTERPRUNE_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets
from .checkpoint import CheckpointError, load_checkpoint_file, save_checkpoint_file
from .config import FIELDS, config_from_mapping, load_config
from .criteria import CRITERIA, CriterionError
from .netgraph import FAMILIES, ArchSpec, GraphError, build_model, count_costs, layer_costs
from .pipeline import ConfigError, run_prune_schedule
from .report import comparison_table, emit_report, read_csv
from .stats import StatsError, collect_stats, save_stats
from .surgery import SurgeryError
from .tensor import NonFiniteError, ShapeError
from .training import SCOPES, TrainingError, check_gradients, evaluate, train_epochs

THREADS_ENV = "FILTERPRUNE_THREADS"

# category -> exit code; argparse itself exits 2 on usage errors
EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "data": 4,
    "checkpoint": 5,
    "graph": 6,
    "numeric": 7,
    "io": 8,
    "gradcheck": 9,
    "internal": 70,
}

# stem then (a, b, stem) per residual block for resnet-tiny
TRAIN_WIDTHS = {"vgg-tiny": "16,16,32,32", "resnet-tiny": "16,16,16,16,16,16,16"}
CHECK_WIDTHS = {"vgg-tiny": "4,4,6,6", "resnet-tiny": "4,3,3,4,5,2,4"}


def _widths(args, defaults) -> list[int]:
    return _int_list(args.widths or defaults[args.family])


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (datasets.DatasetError, TrainingError)):
        return "data"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (GraphError, SurgeryError, ShapeError, CriterionError, StatsError)):
        return "graph"
    if isinstance(exc, (NonFiniteError, FloatingPointError)):
        return "numeric"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _log(msg: str):
    print(msg, file=sys.stderr)


# verbs ------------------------------------------------------------------------


def cmd_ingest(args):
    if args.source == "synthetic":
        raw = datasets.make_synthetic(args.seed, args.images, args.classes, (args.channels, args.size, args.size))
    elif args.source == "digits":
        raw = datasets.make_digits(seed=args.seed)
    else:
        if args.input is None:
            raise CliError("usage", f"--input is required for {args.source}")
        ingest = datasets.ingest_mnist if args.source == "mnist" else datasets.ingest_cifar10
        raw = ingest(args.input)
    datasets.save_dataset(raw, args.out)
    sizes = ", ".join(f"{split} {len(v[1])}" for split, v in raw.splits.items())
    print(f"wrote {args.out}: {raw.name}, {len(raw.class_names)} classes, {sizes}")


def cmd_subset(args):
    raw = datasets.read_raw(Path(args.data).read_bytes())
    spec = datasets.ClassSubsetSpec(raw.name, _int_list(args.classes), args.name or "")
    sub = datasets.subset_raw(raw, spec)
    datasets.save_dataset(sub, args.out)
    print(f"wrote {args.out}: {sub.name}, classes {spec.class_ids} -> 0..{len(spec.class_ids) - 1}")


def cmd_train(args):
    train = datasets.load_dataset(args.data, "train")
    spec = ArchSpec(args.family, _widths(args, TRAIN_WIDTHS), train.images.shape[1:], train.class_count, args.hidden)
    spec.validate()
    net = build_model(spec, args.seed)
    eval_data = datasets.load_dataset(args.data, args.eval_split) if args.eval_split else None

    def report(epoch, model):
        if eval_data is not None:
            _log(f"epoch {epoch}: eval accuracy {evaluate(model, eval_data):.4f}")

    train_epochs(net, train, args.epochs, args.lr, args.momentum, args.batch_size, args.seed, on_epoch=report)
    save_checkpoint_file(net, args.out)
    params, mult_adds = count_costs(net)
    print(f"wrote {args.out}: {params} params, {mult_adds} mult-adds")


def cmd_eval(args):
    net = load_checkpoint_file(args.checkpoint)
    data = datasets.load_dataset(args.data, args.split)
    print(f"{evaluate(net, data):.9g}")


def cmd_stats(args):
    net = load_checkpoint_file(args.checkpoint)
    data = datasets.load_dataset(args.data, args.split)
    layers = args.layers.split(",") if args.layers else None
    bundle = collect_stats(net, data, with_gradients=args.gradients, bins=args.bins, layer_ids=layers)
    if args.out:
        Path(args.out).write_bytes(save_stats(bundle))
    print("layer_id,filters,mean_activation_avg,zero_fraction_avg")
    for lid, fs in bundle.layers.items():
        print(f"{lid},{len(fs.mean_activation)},{fs.mean_activation.mean():.6g},{fs.zero_fraction.mean():.6g}")


def _overrides(args) -> dict[str, str]:
    out = {}
    for key in FIELDS:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = str(value)
    return out


def cmd_prune(args):
    overrides = _overrides(args)
    if args.config:
        config = load_config(args.config, overrides)
    else:
        config = config_from_mapping(overrides).validate()
    net = load_checkpoint_file(args.checkpoint)
    train = datasets.load_dataset(args.data, "train")
    eval_data = datasets.load_dataset(args.data, args.eval_split)
    try:
        pruned, report = run_prune_schedule(net, config, train, eval_data, log=_log if args.verbose else None)
    except Exception as exc:
        partial = getattr(exc, "partial_report", None)
        if partial is not None and args.report_dir and partial.steps:
            emit_report(partial, args.report_dir)
            _log(f"partial report with {len(partial.steps)} steps written to {args.report_dir}")
        raise
    if args.out:
        save_checkpoint_file(pruned, args.out)
    if args.report_dir:
        emit_report(report, args.report_dir)
    print(f"baseline {report.baseline_accuracy:.9g} final {report.final_accuracy:.9g} "
          f"params {report.params} mult_adds {report.mult_adds}")


def cmd_report(args):
    runs = {}
    for spec in args.csv:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).parent.name or spec, spec
        runs[name] = read_csv(path)
    sys.stdout.write(comparison_table(runs, args.field))


def cmd_gradcheck(args):
    if args.checkpoint:
        net = load_checkpoint_file(args.checkpoint)
    else:
        spec = ArchSpec(args.family, _widths(args, CHECK_WIDTHS), (1, args.size, args.size), 10, args.hidden)
        spec.validate()
        net = build_model(spec, args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(args.examples, *net.input_shape))
    labels = rng.integers(0, net.class_count, size=args.examples)
    err = check_gradients(net, x, labels, seed=args.seed)
    print(f"max relative error {err:.3e}")
    if err >= args.tolerance:
        raise CliError("gradcheck", f"max relative error {err:.3e} exceeds {args.tolerance:g}")


def cmd_costs(args):
    net = load_checkpoint_file(args.checkpoint)
    print("layer_id,params,mult_adds")
    for lid, (p, m) in layer_costs(net).items():
        print(f"{lid},{p},{m}")
    total = count_costs(net)
    print(f"total,{total[0]},{total[1]}")


# parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="filterprune", description="Structured filter pruning experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="create a dataset file")
    p.add_argument("source", choices=["synthetic", "digits", "mnist", "cifar10"])
    p.add_argument("--out", required=True)
    p.add_argument("--input", help="directory holding the downloaded archive files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=1000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--size", type=int, default=16)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("subset", help="extract a class subset of a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--classes", required=True, help="comma-separated parent class ids")
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("train", help="train a network from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--family", choices=FAMILIES, default="vgg-tiny")
    p.add_argument("--widths", help="comma-separated conv widths (default depends on --family)")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-split", default="eval", help="split to report per epoch ('' to disable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="collect per-filter activation statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--layers", help="comma-separated conv layer ids")
    p.add_argument("--gradients", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("prune", help="run a prune / fine-tune schedule")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-split", default="eval")
    p.add_argument("--config", help="INI file with a [prune] section")
    p.add_argument("--out", help="pruned checkpoint path")
    p.add_argument("--report-dir", help="directory for report.csv and summary.txt")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--retrain-scope", dest="retrain_scope", choices=SCOPES)
    for key in FIELDS:
        if key not in ("criterion", "retrain_scope"):
            p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="per-layer comparison table from report CSVs")
    p.add_argument("csv", nargs="+", help="report.csv paths, optionally as name=path")
    p.add_argument("--field", default="acc_recovery",
                   choices=["acc_damage", "acc_recovery", "epochs_to_peak", "kept", "params", "mult_adds"])
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="compare backprop with finite differences")
    p.add_argument("--checkpoint")
    p.add_argument("--family", choices=FAMILIES, default="vgg-tiny")
    p.add_argument("--widths", help="comma-separated conv widths (default depends on --family)")
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--examples", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("costs", help="per-layer parameter and mult-add counts")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_costs)
    return parser


def _thread_limit() -> int | None:
    text = os.environ.get(THREADS_ENV)
    if not text:
        return None
    try:
        n = int(text)
    except ValueError:
        raise CliError("usage", f"{THREADS_ENV} must be a positive integer, got {text!r}") from None
    if n < 1:
        raise CliError("usage", f"{THREADS_ENV} must be a positive integer, got {text!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_thread_limit()):
            args.func(args)
    except Exception as exc:
        category = _categorize(exc)
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return EXIT_CODES[category]
    return 0
