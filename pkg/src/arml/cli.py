"""Command-line interface.

Subcommands: train, certify, attack, eval, boundary-grid. Every command
that writes files also writes a JSON manifest next to its primary
output with the resolved flags, dataset checksums, seed, and wall time,
so outputs can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attack import empirical_curve
from .certify import certified_curve
from .dataset import Dataset, load_dataset, sample_subset
from .knn import KnnModel, clean_error
from .metric import MetricFactor, load_metric, save_metric
from .trainer import TrainConfig, train


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(primary_output, command: str, flags: dict,
                    data_paths: dict, seed, wall_time: float,
                    outputs: list) -> None:
    manifest = {
        "tool": f"arml {__version__}",
        "command": command,
        "flags": {k: v for k, v in flags.items() if not k.startswith("_")},
        "datasets": {name: {"path": str(p), "sha256": _sha256(p)}
                     for name, p in data_paths.items()},
        "seed": seed,
        "wall_time_seconds": round(wall_time, 3),
        "outputs": [str(o) for o in outputs],
    }
    path = Path(str(primary_output) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("ARML_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SystemExit(f"ARML_THREADS must be an integer, got {env!r}")
    return 1


def _parse_radii(text: str) -> tuple[list[str], list[float]]:
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if not tokens:
        raise ValueError("empty radius list")
    values = [float(t) for t in tokens]
    return tokens, values


def _load_train_test(train_path, test_path, dim_hint):
    train_data = load_dataset(train_path, dim_hint=dim_hint)
    test_data = load_dataset(test_path, dim_hint=train_data.num_features)
    if test_data.num_features > train_data.num_features:
        train_data = load_dataset(train_path,
                                  dim_hint=test_data.num_features)
    return train_data, test_data


def _metric_for(args, dim: int) -> MetricFactor:
    if getattr(args, "metric", None):
        m = load_metric(args.metric)
        if m.dim != dim:
            raise SystemExit(
                f"metric dimension {m.dim} does not match data "
                f"dimension {dim}")
        return m
    return MetricFactor.identity(dim)


def _maybe_sample(data: Dataset, n: int | None, seed: int) -> Dataset:
    if n is None or n >= data.num_instances:
        return data
    return sample_subset(data, n, seed)


def _cmd_train(args) -> int:
    t0 = time.perf_counter()
    data = load_dataset(args.data, dim_hint=args.dim_hint)
    cfg = TrainConfig(loss=args.loss, epochs=args.epochs,
                      neighborhood=args.neighborhood, lr=args.lr,
                      beta1=args.beta1, beta2=args.beta2,
                      seed=args.seed, objective=args.objective,
                      k_neighbors=args.k, factor_rows=args.factor_rows)
    log_path = args.log or str(Path(args.out).parent / "loss.csv")
    metric = train(data, cfg, loss_log=log_path)
    save_metric(metric, args.out)
    _write_manifest(args.out, "train", vars(args), {"data": args.data},
                    args.seed, time.perf_counter() - t0,
                    [args.out, log_path])
    print(f"wrote metric {args.out} ({metric.rank_rows}x{metric.dim}), "
          f"loss log {log_path}")
    return 0


def _cmd_certify(args, parser) -> int:
    t0 = time.perf_counter()
    if args.mode == "exact" and args.k != 1:
        parser.error("--mode exact requires --k 1")
    train_data, test_data = _load_train_test(args.train, args.test,
                                             args.dim_hint)
    test_data = _maybe_sample(test_data, args.sample, args.seed)
    metric = _metric_for(args, train_data.num_features)
    model = KnnModel(train_data, metric, args.k)
    radius_strings, radii = _parse_radii(args.radii)
    mode = "exact1nn" if args.mode == "exact" else "theorem1"
    curve = certified_curve(model, test_data, radii, mode=mode,
                            threads=_resolve_threads(args.threads))
    curve.write_csv(args.out, radius_strings)
    _write_manifest(args.out, "certify", vars(args),
                    {"train": args.train, "test": args.test},
                    args.seed, time.perf_counter() - t0, [args.out])
    print(f"wrote certified curve {args.out}")
    return 0


def _cmd_attack(args) -> int:
    t0 = time.perf_counter()
    train_data, test_data = _load_train_test(args.train, args.test,
                                             args.dim_hint)
    test_data = _maybe_sample(test_data, args.sample, args.seed)
    metric = _metric_for(args, train_data.num_features)
    model = KnnModel(train_data, metric, args.k)
    radius_strings, radii = _parse_radii(args.radii)
    curve = empirical_curve(model, test_data, radii, steps=args.steps,
                            seed=args.seed,
                            threads=_resolve_threads(args.threads))
    curve.write_csv(args.out, radius_strings)
    _write_manifest(args.out, "attack", vars(args),
                    {"train": args.train, "test": args.test},
                    args.seed, time.perf_counter() - t0, [args.out])
    print(f"wrote empirical curve {args.out}")
    return 0


def _cmd_eval(args, parser) -> int:
    t0 = time.perf_counter()
    if args.loo:
        train_data = load_dataset(args.train, dim_hint=args.dim_hint)
        test_data = train_data
    else:
        if not args.test:
            parser.error("--test is required unless --loo is given")
        train_data, test_data = _load_train_test(args.train, args.test,
                                                 args.dim_hint)
    metric = _metric_for(args, train_data.num_features)
    model = KnnModel(train_data, metric, args.k)
    err = clean_error(model, test_data, leave_one_out=args.loo)
    if not np.isfinite(err):
        raise SystemExit("clean error is not finite")
    print(f"clean_error {err:.6f}")
    if args.out:
        Path(args.out).write_text(f"clean_error\n{err:.6f}\n",
                                  encoding="utf-8")
        data_paths = {"train": args.train}
        if not args.loo:
            data_paths["test"] = args.test
        _write_manifest(args.out, "eval", vars(args), data_paths,
                        None, time.perf_counter() - t0, [args.out])
    return 0


def _cmd_boundary_grid(args, parser) -> int:
    t0 = time.perf_counter()
    train_data = load_dataset(args.train, dim_hint=args.dim_hint)
    if train_data.num_features != 2:
        parser.error("boundary-grid requires 2-dimensional data")
    metric = _metric_for(args, 2)
    model = KnnModel(train_data, metric, args.k)
    if args.box:
        parts = [float(v) for v in args.box.split(",")]
        if len(parts) != 4:
            parser.error("--box must be x1min,x1max,x2min,x2max")
        x1min, x1max, x2min, x2max = parts
    else:
        lo = train_data.features.min(axis=0)
        hi = train_data.features.max(axis=0)
        margin = 0.1 * (hi - lo + 1e-12)
        x1min, x2min = lo - margin
        x1max, x2max = hi + margin
    g = args.grid_size
    xs = np.linspace(x1min, x1max, g)
    ys = np.linspace(x2min, x2max, g)
    from .knn import predict_batch

    grid = np.array([[a, b] for a in xs for b in ys])
    preds = predict_batch(model, grid)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("x1,x2,predicted_class\n")
        for (a, b), p in zip(grid, preds):
            orig = train_data.original_labels[p]
            fh.write(f"{a:.9g},{b:.9g},{orig:g}\n")
    _write_manifest(args.out, "boundary-grid", vars(args),
                    {"train": args.train}, None,
                    time.perf_counter() - t0, [args.out])
    print(f"wrote prediction grid {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arml",
        description="Robust Mahalanobis metric learning for K-NN: "
                    "train, certify, attack, evaluate.")
    parser.add_argument("--version", action="version",
                        version=f"arml {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_model_flags(p, with_test=True):
        p.add_argument("--train", required=True, help="training set (LIBSVM)")
        if with_test:
            p.add_argument("--test", required=True, help="test set (LIBSVM)")
        p.add_argument("--metric", default=None,
                       help="metric factor file; identity when omitted")
        p.add_argument("--k", type=int, default=1,
                       help="number of neighbors (odd)")
        p.add_argument("--dim-hint", type=int, default=None)

    p_train = sub.add_parser("train", help="learn a robust metric")
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True, help="metric output file")
    p_train.add_argument("--loss", default="negative",
                         choices=["negative", "hinge", "exponential",
                                  "logistic"])
    p_train.add_argument("--epochs", type=int, default=1000)
    p_train.add_argument("--neighborhood", type=int, default=10)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--beta1", type=float, default=0.9)
    p_train.add_argument("--beta2", type=float, default=0.999)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--objective", default="sampled",
                         choices=["sampled", "exact_kth"])
    p_train.add_argument("--k", type=int, default=1,
                         help="target classifier K for exact_kth")
    p_train.add_argument("--factor-rows", type=int, default=None,
                         help="rows of the factor (low-rank metric)")
    p_train.add_argument("--log", default=None,
                         help="loss log path (default: loss.csv beside "
                              "the metric file)")
    p_train.add_argument("--dim-hint", type=int, default=None)

    p_cert = sub.add_parser("certify", help="certified robust-error curve")
    add_common_model_flags(p_cert)
    p_cert.add_argument("--mode", default="theorem1",
                        choices=["theorem1", "exact"])
    p_cert.add_argument("--radii", required=True,
                        help="comma-separated ascending radii")
    p_cert.add_argument("--sample", type=int, default=None,
                        help="evaluate on a random subsample of this size")
    p_cert.add_argument("--seed", type=int, default=0)
    p_cert.add_argument("--threads", type=int, default=None)
    p_cert.add_argument("--out", default="certified_curve.csv")

    p_att = sub.add_parser("attack", help="empirical robust-error curve")
    add_common_model_flags(p_att)
    p_att.add_argument("--radii", required=True)
    p_att.add_argument("--steps", type=int, default=1000)
    p_att.add_argument("--sample", type=int, default=None)
    p_att.add_argument("--seed", type=int, default=0)
    p_att.add_argument("--threads", type=int, default=None)
    p_att.add_argument("--out", default="empirical_curve.csv")

    p_eval = sub.add_parser("eval", help="clean classification error")
    p_eval.add_argument("--train", required=True)
    p_eval.add_argument("--test", default=None)
    p_eval.add_argument("--metric", default=None)
    p_eval.add_argument("--k", type=int, default=1)
    p_eval.add_argument("--loo", action="store_true",
                        help="leave-one-out error on the training set")
    p_eval.add_argument("--dim-hint", type=int, default=None)
    p_eval.add_argument("--out", default=None)

    p_grid = sub.add_parser("boundary-grid",
                            help="decision grid for 2-D data")
    p_grid.add_argument("--train", required=True)
    p_grid.add_argument("--metric", default=None)
    p_grid.add_argument("--k", type=int, default=1)
    p_grid.add_argument("--grid-size", type=int, default=100)
    p_grid.add_argument("--box", default=None,
                        help="x1min,x1max,x2min,x2max (default: data "
                             "bounding box plus 10%% margin)")
    p_grid.add_argument("--dim-hint", type=int, default=None)
    p_grid.add_argument("--out", default="boundary_grid.csv")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "certify":
            return _cmd_certify(args, parser)
        if args.command == "attack":
            return _cmd_attack(args)
        if args.command == "eval":
            return _cmd_eval(args, parser)
        if args.command == "boundary-grid":
            return _cmd_boundary_grid(args, parser)
        parser.error(f"unknown command {args.command!r}")
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
