"""Command-line front end: run experiments, solve noise, inspect partitions."""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
import typing
from pathlib import Path

import numpy as np

from .aggregation import coordinate_median, krum, rfa_geometric_median, trimmed_mean
from .data import get_non_iid, load_idx, partition_iid, synthetic_classes
from .dp_engine import InfeasiblePrivacyError, solve_sigma
from .harness import (DATA_ROOT_ENV, ConfigError, ExperimentConfig, emit_metrics,
                      load_config, run_experiment)
from .numerics import DOMAIN_DATA, stream

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_overrides(parser: argparse.ArgumentParser) -> None:
    hints = typing.get_type_hints(ExperimentConfig)
    for f in dataclasses.fields(ExperimentConfig):
        hint = hints[f.name]
        if typing.get_origin(hint) is not None:  # Optional[...] fields arrive as strings
            parser.add_argument(_flag(f.name), dest=f.name, default=None)
        elif hint is bool:
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                choices=("true", "false"))
        else:
            parser.add_argument(_flag(f.name), dest=f.name, type=hint, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisegate",
        description="Simulate DP federated learning with noise-statistics upload filtering.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment end to end")
    run_p.add_argument("--config", type=Path, default=None, help="flat key/value config file")
    run_p.add_argument("--seed", type=int, default=None, help="override master_seed")
    run_p.add_argument("--out", type=Path, default=Path("results"),
                       help="directory for metrics.jsonl and summary.csv")
    _add_config_overrides(run_p)

    sigma_p = sub.add_parser("sigma", help="solve the noise multiplier for a budget")
    sigma_p.add_argument("--eps", type=float, required=True)
    sigma_p.add_argument("--delta", type=float, required=True)
    sigma_p.add_argument("--q", type=float, required=True)
    sigma_p.add_argument("--T", type=int, required=True, dest="steps")

    part_p = sub.add_parser("partition", help="build a partition and print shard stats")
    part_p.add_argument("--dataset", default="synthetic")
    part_p.add_argument("--data-root", default="", help=f"IDX root (default ${DATA_ROOT_ENV})")
    part_p.add_argument("--n", type=int, required=True, help="number of workers")
    part_p.add_argument("--mode", choices=("iid", "non_iid"), default="iid")
    part_p.add_argument("--seed", type=int, default=1)
    part_p.add_argument("--samples", type=int, default=10000, help="synthetic sample count")
    part_p.add_argument("--classes", type=int, default=10)
    part_p.add_argument("--features", type=int, default=32)
    part_p.add_argument("--separation", type=float, default=8.0)
    part_p.add_argument("--summary", action="store_true", help="print per-shard class skew")

    bench_p = sub.add_parser("aggbench", help="time the baseline aggregators")
    bench_p.add_argument("--n", type=int, default=50)
    bench_p.add_argument("--dim", type=int, default=8554)
    bench_p.add_argument("--trials", type=int, default=5)
    bench_p.add_argument("--gamma", type=float, default=0.4)
    bench_p.add_argument("--seed", type=int, default=1)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    if args.config is not None and not args.config.exists():
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return USAGE_ERROR
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        overrides = {f.name: getattr(args, f.name)
                     for f in dataclasses.fields(ExperimentConfig)
                     if getattr(args, f.name) is not None}
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if overrides:
            merged = dataclasses.asdict(config)
            merged.update({k: str(v) for k, v in overrides.items()})
            from .harness import config_from_mapping
            config = config_from_mapping({k: str(v) for k, v in merged.items()
                                          if v is not None})
        config.validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    result = run_experiment(config)
    jsonl_path, csv_path = emit_metrics(result, args.out)
    print(f"rounds={result.total_rounds} sigma={result.sigma:.4g} eta={result.eta:.4g} "
          f"final_accuracy={result.final_accuracy:.4f}")
    print(f"wrote {jsonl_path} and {csv_path}")
    return 0


def _cmd_sigma(args: argparse.Namespace) -> int:
    sigma = solve_sigma(args.eps, args.delta, args.q, args.steps)
    print(f"{sigma:.4g}")
    return 0


def _cmd_partition(args: argparse.Namespace) -> int:
    if args.dataset == "synthetic":
        dataset = synthetic_classes(args.samples, args.classes, args.features,
                                    args.separation, stream(args.seed, DOMAIN_DATA, 0))
    else:
        import os
        root = Path(args.data_root or os.environ.get(DATA_ROOT_ENV, "."))
        base = root / args.dataset
        dataset = load_idx(base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte")
    rng = stream(args.seed, DOMAIN_DATA, 2)
    plan = (partition_iid if args.mode == "iid" else get_non_iid)(dataset, args.n, rng)
    sizes = plan.sizes()
    print(f"workers={args.n} mode={args.mode} shard_sizes: min={min(sizes)} "
          f"max={max(sizes)} mean={sum(sizes) / len(sizes):.1f}")
    if args.summary:
        for i, shard in enumerate(plan.shards):
            counts = np.bincount(dataset.labels[shard], minlength=dataset.n_classes)
            share = counts.max() / max(1, counts.sum())
            print(f"shard {i:3d}: size={len(shard):6d} top_class_share={share:.3f}")
    return 0


def _cmd_aggbench(args: argparse.Namespace) -> int:
    rng = stream(args.seed, DOMAIN_DATA, 0)
    uploads = [rng.standard_normal(args.dim) for _ in range(args.n)]
    benchmarks = {
        "krum": lambda: krum(uploads, args.gamma),
        "rfa": lambda: rfa_geometric_median(uploads),
        "cm": lambda: coordinate_median(uploads),
        "tm": lambda: trimmed_mean(uploads, args.gamma),
    }
    print(f"n={args.n} dim={args.dim} trials={args.trials}")
    for name, fn in benchmarks.items():
        tic = time.perf_counter()
        for _ in range(args.trials):
            fn()
        elapsed = (time.perf_counter() - tic) / args.trials
        print(f"{name:5s} {elapsed * 1e3:10.2f} ms/call")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": _cmd_run, "sigma": _cmd_sigma,
                "partition": _cmd_partition, "aggbench": _cmd_aggbench}
    try:
        return handlers[args.command](args)
    except (ConfigError, InfeasiblePrivacyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
