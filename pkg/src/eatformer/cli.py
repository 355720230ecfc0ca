"""``eatformer`` command line: summary, verify, train, report, build, dataset.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
``EATF_THREADS`` caps the BLAS/OpenMP thread pools.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .analysis import alpha_report, model_cost
from .data import load_dataset, save_dataset, synthetic_blobs
from .errors import EATFormerError
from .fileio import atomic_write
from .model import VARIANTS, build_variant, get_variant, load_checkpoint, load_variant_config, save_checkpoint, \
    save_variant_config
from .training import fit, restore, snapshot
from .verification import SUITES, results_to_dict, run_suites

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return dims[0], dims[1]


def _add_variant_args(p: argparse.ArgumentParser, default: str | None = None) -> None:
    p.add_argument("--variant", default=default, help=f"built-in variant: {', '.join(VARIANTS)}")
    p.add_argument("--config", type=Path, help="YAML variant file (overrides --variant)")
    p.add_argument("--norm", choices=("batchnorm", "layernorm"))
    p.add_argument("--split-ratio", type=float)
    p.add_argument("--ffn-activation", choices=("gelu", "relu"))
    p.add_argument("--trh", action="store_true", help="use the task-related head")
    p.add_argument("--window", type=int)
    p.add_argument("--num-classes", type=int)


def _resolve_spec(args):
    if args.config is not None:
        spec = load_variant_config(args.config)
    elif args.variant is None:
        raise UsageError(f"one of --variant or --config is required; known variants: {', '.join(VARIANTS)}")
    else:
        try:
            spec = get_variant(args.variant)
        except EATFormerError as exc:
            raise UsageError(str(exc)) from None
    overrides = {}
    for key, field in (("norm", "norm"), ("split_ratio", "split_ratio"), ("ffn_activation", "ffn_activation"),
                       ("window", "window"), ("num_classes", "num_classes")):
        value = getattr(args, key)
        if value is not None:
            overrides[field] = value
    if args.trh:
        overrides["use_trh"] = True
    return spec.replace(**overrides).validate()


def _out_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_summary(args) -> int:
    spec = _resolve_spec(args)
    report = model_cost(build_variant(spec, args.seed), args.size)
    print(f"{spec.name} @ {args.size[0]}x{args.size[1]}")
    print(f"{'part':<14}{'params':>14}{'GMACs':>12}")
    for part, (params, macs) in report.by_prefix().items():
        print(f"{part:<14}{params:>14,}{macs / 1e9:>12.4f}")
    print(f"{'total':<14}{report.total_params:>14,}{report.total_macs / 1e9:>12.4f}")
    print(f"FLOPs (2 x MAC + softmax): {report.total_flops / 1e9:.4f} G")
    rec = report.reconcile()
    if rec:
        print(f"published {rec['published_params_m']}M / {rec['published_gflops']}G: "
              f"params {rec['params_rel_error']:+.1%}, MACs {rec['flops_rel_error']:+.1%}")
    out = args.output or _out_dir(args.out) / f"summary_{spec.name}.json"
    report.save(out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    results = run_suites(names, args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}")
    payload = results_to_dict(results)
    if args.output:
        atomic_write(args.output, json.dumps(payload, indent=2))
    if not payload["passed"]:
        print("failed: " + ", ".join(payload["failed"]), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _resolve_spec(args)
    if args.synthetic == (args.dataset is not None):
        raise UsageError("exactly one of --synthetic or --dataset is required")
    if args.synthetic:
        ds = synthetic_blobs(args.samples, spec.num_classes, args.image_size, args.seed)
    else:
        ds = load_dataset(args.dataset)
    if len(ds) < 2:
        raise UsageError("the dataset needs at least two images")
    if ds.num_classes > spec.num_classes:
        raise UsageError(f"dataset has {ds.num_classes} classes but the model has {spec.num_classes}")
    out = _out_dir(args.out)
    model = build_variant(spec, args.seed)
    best = {"acc": -1.0, "state": snapshot(model)}
    rows = []

    def on_epoch(metrics, m):
        rows.append(metrics)
        print(f"epoch {metrics.epoch:4d}  loss {metrics.loss:.6f}  train_acc {metrics.train_accuracy:.4f}")
        if metrics.train_accuracy > best["acc"]:
            best["acc"], best["state"] = metrics.train_accuracy, snapshot(m)

    fit(model, ds.as_float(), ds.labels, args.epochs, args.batch_size, args.lr, args.weight_decay, args.seed,
        args.target_accuracy, on_epoch)
    restore(model, best["state"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "train_accuracy"])
    for m in rows:
        writer.writerow([m.epoch, repr(m.loss), repr(m.train_accuracy)])
    atomic_write(out / "metrics.csv", buf.getvalue())
    save_checkpoint(model, out / "best.eatf")
    save_variant_config(spec, out / "variant.yaml")
    report = alpha_report(model)
    report.save(out / "alphas.csv")
    report.save(out / "alphas.json")
    if rows:
        print(f"final train accuracy {rows[-1].train_accuracy:.4f}; best {best['acc']:.4f}; outputs in {out}")
    else:
        print(f"no epochs run; saved the initial model in {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
    else:
        model = build_variant(_resolve_spec(args), args.seed)
    out = _out_dir(args.out)
    cost = model_cost(model, args.size)
    alphas = alpha_report(model)
    for path, rep in ((out / "cost.csv", cost), (out / "cost.json", cost),
                      (out / "alphas.csv", alphas), (out / "alphas.json", alphas)):
        rep.save(path)
    print(f"{model.spec.name}: {cost.total_params:,} params, {cost.total_macs / 1e9:.4f} GMACs; "
          f"{len(alphas.rows)} blocks; reports in {out}")
    return EXIT_OK


def cmd_build(args) -> int:
    spec = _resolve_spec(args)
    model = build_variant(spec, args.seed)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.output)
    print(f"built {spec.name} ({model.num_parameters():,} params) -> {args.output}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    ds = synthetic_blobs(args.samples, args.classes, args.image_size, args.seed)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.output)
    print(f"wrote {len(ds)} images of {args.image_size}x{args.image_size} -> {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eatformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="per-stage parameter/FLOP table and CostReport JSON")
    _add_variant_args(p)
    p.add_argument("--size", type=_parse_size, default=(224, 224), help="input size N or HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."), help="directory for summary_<variant>.json")
    p.add_argument("--output", type=Path, help="explicit report path (.json or .csv)")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("verify", help="run invariant suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, help="JSON report path")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train on a dataset and save metrics, checkpoint and alphas")
    _add_variant_args(p, default="desk")
    p.add_argument("--synthetic", action="store_true", help="use the seeded Gaussian-blob dataset")
    p.add_argument("--dataset", type=Path, help="EATD dataset file")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--weight-decay", type=float, default=5e-2)
    p.add_argument("--target-accuracy", type=float, help="stop once train accuracy reaches this value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/train"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="cost and alpha reports for a checkpoint or variant")
    _add_variant_args(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--size", type=_parse_size, default=(224, 224))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("reports"))
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("build", help="write an initialised checkpoint")
    _add_variant_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("dataset", help="write a synthetic dataset in the EATD container")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, required=True)
    p.set_defaults(func=cmd_dataset)
    return parser


def thread_limit() -> int | None:
    raw = os.environ.get("EATF_THREADS")
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"EATF_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"EATF_THREADS must be a positive integer, got {raw!r}")
    return value


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        limit = thread_limit()
        if limit is None:
            return args.func(args)
        with threadpool_limits(limits=limit):
            return args.func(args)
    except (UsageError, EATFormerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
