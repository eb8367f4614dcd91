"""Experiment orchestration: config, the round loop, and metrics files.

A run is a pure function of (config, master_seed): datasets, shards, model
init, mini-batches, noise, and attacks all draw from keyed RNG streams, so
repeating a run reproduces the metrics files byte for byte.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import os
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks as atk
from .aggregation import (FilterResult, ServerState, apply_update, coordinate_median,
                          filter_gradient, first_agg, first_agg_verdict, krum,
                          rfa_geometric_median, selection_size, trimmed_mean)
from .data import (Dataset, PartitionPlan, get_non_iid, load_idx, partition_iid,
                   sample_auxiliary, synthetic_classes)
from .dp_engine import (MOMENTUM_MODES, WorkerState, honest_upload, plan_learning_rate,
                        solve_sigma)
from .model import MlpModel
from .numerics import DOMAIN_ATTACK, DOMAIN_DATA, DOMAIN_SERVER, DOMAIN_WORKER, stream

DATA_ROOT_ENV = "NOISEGATE_DATA"
AGGREGATORS = ("two_stage", "krum", "rfa", "cm", "tm", "none")
PARTITIONS = ("iid", "non_iid")
COPY_SOURCES = ("fixed", "random")

# Sub-keys of the data-synthesis / server RNG domains.
_DATA_TRAIN, _DATA_TEST, _DATA_PARTITION, _DATA_AUX = 0, 1, 2, 3
_SERVER_INIT = 0


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Flat experiment description; every field has a config-file key and CLI flag."""

    dataset: str = "synthetic"
    data_root: str = ""                 # empty -> $NOISEGATE_DATA
    n_honest: int = 20
    n_byzantine: int = 0
    attack: str = "none"
    ttbb: float = 0.0
    lambda_override: float | None = None
    gamma: float = 0.5
    epsilon: float = 2.0
    delta: float | None = None          # None -> 1/|D_i|^1.1
    sigma: float | None = None          # None -> solve from (epsilon, delta, q, T)
    b_c: int = 16
    beta: float = 0.1
    base_eta: float = 0.2
    base_sigma: float = 0.79
    epochs: float = 8.0
    hidden_dim: int = 32
    momentum_reset: str = "paper_literal"
    aggregator: str = "two_stage"
    compose_first_stage: bool = False   # pass baselines' inputs through the stage-one gate
    partition: str = "iid"
    aux_per_class: int = 2
    clamp_scores: bool = False
    copy_source: str = "fixed"
    eval_every: int | None = None       # None -> ceil(T/50)
    master_seed: int = 1
    synth_samples_per_worker: int = 512
    synth_features: int = 256
    synth_classes: int = 10
    synth_separation: float = 8.0
    synth_test_samples: int = 2000

    def validate(self) -> None:
        if self.n_honest < 1:
            raise ConfigError("need at least one honest worker")
        if self.n_byzantine < 0:
            raise ConfigError("n_byzantine must be non-negative")
        if self.attack not in atk.ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.attack!r}; choose from {atk.ATTACK_KINDS}")
        if not 0.0 <= self.ttbb <= 1.0:
            raise ConfigError("ttbb must be in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must be in (0, 1]")
        if self.sigma is None and self.epsilon <= 0:
            raise ConfigError("epsilon must be positive when sigma is solved")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must be in (0, 1)")
        if self.b_c < 1:
            raise ConfigError("b_c must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("beta must be in [0, 1)")
        if self.base_eta <= 0 or self.base_sigma <= 0:
            raise ConfigError("base_eta and base_sigma must be positive")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be positive")
        if self.momentum_reset not in MOMENTUM_MODES:
            raise ConfigError(f"momentum_reset must be one of {MOMENTUM_MODES}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}; choose from {AGGREGATORS}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"partition must be one of {PARTITIONS}")
        if self.aux_per_class < 1:
            raise ConfigError("aux_per_class must be positive")
        if self.copy_source not in COPY_SOURCES:
            raise ConfigError(f"copy_source must be one of {COPY_SOURCES}")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if min(self.synth_samples_per_worker, self.synth_features,
               self.synth_test_samples) < 1 or self.synth_classes < 2:
            raise ConfigError("synthetic sizing fields must be positive (>= 2 classes)")
        if self.synth_separation < 0:
            raise ConfigError("synth_separation must be non-negative")
        if self.attack == "optimized_local" and self.n_byzantine > 0:
            if self.n_byzantine <= math.sqrt(self.n_honest):
                raise ConfigError(
                    "optimized attack infeasible: needs n_byzantine > sqrt(n_honest), "
                    f"got {self.n_byzantine} <= sqrt({self.n_honest}) "
                    f"= {math.sqrt(self.n_honest):.3f}")

    def config_hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a flat key/value config file (section headers allowed, then ignored)."""
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in flat:
                raise ConfigError(f"duplicate config key {key!r}")
            flat[key] = value
    return config_from_mapping(flat)


def config_from_mapping(mapping: dict[str, str]) -> ExperimentConfig:
    hints = typing.get_type_hints(ExperimentConfig)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {key: _coerce(key, value, hints[key]) for key, value in mapping.items()}
    return ExperimentConfig(**kwargs)


def _coerce(key: str, raw: str, hint) -> object:
    raw = raw.strip()
    optional = typing.get_origin(hint) in (typing.Union, getattr(__import__("types"), "UnionType", ()))
    if optional:
        if raw.lower() in ("none", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw.strip("\"'")
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {hint.__name__}") from exc


# ---------------------------------------------------------------------------
# Round traces and results
# ---------------------------------------------------------------------------


@dataclass
class RoundTrace:
    round_index: int
    verdicts: list[bool]             # stage-one pass per worker
    score_increments: list[float]
    selected: list[int]
    scores: list[float]              # accumulated scores after this round
    accuracy: float | None           # test accuracy when evaluated this round
    wall_time: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    traces: list[RoundTrace]
    sigma: float
    eta: float
    delta: float
    q: float
    total_rounds: int
    honest_mask: np.ndarray
    final_accuracy: float


# ---------------------------------------------------------------------------
# The experiment loop
# ---------------------------------------------------------------------------


def _load_datasets(config: ExperimentConfig, n_total: int) -> tuple[Dataset, Dataset]:
    if config.dataset == "synthetic":
        # One draw for train+test so both splits share the same class means.
        n_train = config.synth_samples_per_worker * n_total
        full = synthetic_classes(
            n_train + config.synth_test_samples, config.synth_classes,
            config.synth_features, config.synth_separation,
            stream(config.master_seed, DOMAIN_DATA, _DATA_TRAIN))
        train = full.subset(np.arange(n_train), name="synthetic-train")
        test = full.subset(np.arange(n_train, len(full)), name="synthetic-test")
        return train, test
    root = Path(config.data_root or os.environ.get(DATA_ROOT_ENV, "."))
    base = root / config.dataset
    train = load_idx(base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte")
    test = load_idx(base / "t10k-images-idx3-ubyte", base / "t10k-labels-idx1-ubyte")
    return train, test


def round_budget(epochs: float, shard_size: int, b_c: int) -> int:
    """Rounds needed for the smallest shard to be visited `epochs` times."""
    if epochs <= 0:
        raise ValueError(f"epochs must be positive, got {epochs!r}")
    if shard_size < b_c:
        raise ValueError(f"shard size {shard_size} is below the batch size {b_c}")
    return math.ceil(epochs * shard_size / b_c)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the full protocol for one config; returns per-round traces."""
    config.validate()
    seed = config.master_seed
    n_total = config.n_honest + config.n_byzantine
    n_byz = config.n_byzantine
    spec = atk.AttackSpec(config.attack, config.ttbb, config.lambda_override)

    train, test = _load_datasets(config, n_total)
    partition_rng = stream(seed, DOMAIN_DATA, _DATA_PARTITION)
    if config.partition == "iid":
        plan = partition_iid(train, n_total, partition_rng)
    else:
        plan = get_non_iid(train, n_total, partition_rng)
    min_shard = min(plan.sizes())
    if min_shard < config.b_c:
        raise ConfigError(f"smallest shard ({min_shard}) is below the batch size {config.b_c}")

    total_rounds = round_budget(config.epochs, min_shard, config.b_c)
    q = config.b_c / min_shard
    delta = config.delta if config.delta is not None else min_shard ** -1.1
    sigma = config.sigma if config.sigma is not None else solve_sigma(
        config.epsilon, delta, q, total_rounds)
    eta = plan_learning_rate(config.base_eta, config.base_sigma, sigma)
    eval_every = config.eval_every or max(1, math.ceil(total_rounds / 50))

    model = MlpModel(train.features.shape[1], config.hidden_dim, train.n_classes)
    model.init_params(stream(seed, DOMAIN_SERVER, _SERVER_INIT))
    aux = sample_auxiliary(test, config.aux_per_class, stream(seed, DOMAIN_DATA, _DATA_AUX))
    server = ServerState(model=model, n=n_total, gamma=config.gamma, sigma=sigma,
                         b_c=config.b_c, aux_features=aux.features, aux_labels=aux.labels,
                         clamp_scores=config.clamp_scores)

    workers = []
    for i in range(n_total):
        role = "honest" if i < config.n_honest else config.attack
        shard = plan.shards[i]
        workers.append(WorkerState.create(
            i, train.features[shard], train.labels[shard],
            config.b_c, model.dim, config.beta, role))
    honest_mask = np.arange(n_total) < config.n_honest

    traces: list[RoundTrace] = []
    accuracy = None
    for rnd in range(total_rounds):
        tic = time.perf_counter()
        uploads: list[np.ndarray] = [None] * n_total  # type: ignore[list-item]

        # Phase 1: honest workers.
        for i in range(config.n_honest):
            uploads[i] = honest_upload(workers[i], model, sigma,
                                       stream(seed, DOMAIN_WORKER, i, rnd),
                                       config.momentum_reset)

        # Phase 2: attackers observe this round's benign uploads.
        if n_byz:
            benign = uploads[:config.n_honest]
            attacking = rnd >= spec.ttbb * total_rounds
            optimized: list[np.ndarray] = []
            if spec.kind == "optimized_local" and attacking:
                optimized = atk.optimized_attack(benign, n_byz, spec.lambda_override)
            for j in range(n_byz):
                i = config.n_honest + j
                uploads[i] = atk.adaptive_wrap(
                    spec, rnd, total_rounds,
                    inner_behavior=_attacker_behavior(
                        spec, workers[i], model, train.n_classes, sigma, config, seed,
                        rnd, optimized, j),
                    honest_copy_source=_copy_source(
                        benign, config, seed, i, rnd))

        # Aggregation and the model update.
        verdicts, increments, selected = _aggregate(config, server, model, uploads, eta)

        if rnd % eval_every == 0 or rnd == total_rounds - 1:
            accuracy = model.evaluate(test.features, test.labels)
            acc_field = accuracy
        else:
            acc_field = None
        traces.append(RoundTrace(
            round_index=rnd, verdicts=verdicts, score_increments=increments,
            selected=selected, scores=[float(s) for s in server.scores],
            accuracy=acc_field, wall_time=time.perf_counter() - tic))

    final_accuracy = accuracy if accuracy is not None else model.evaluate(
        test.features, test.labels)
    return ExperimentResult(config, traces, sigma, eta, delta, q, total_rounds,
                            honest_mask, float(final_accuracy))


def _attacker_behavior(spec, worker, model, n_classes, sigma, config, seed, rnd,
                       optimized, j):
    def behave() -> np.ndarray:
        if spec.kind == "none":
            return honest_upload(worker, model, sigma,
                                 stream(seed, DOMAIN_WORKER, worker.worker_id, rnd),
                                 config.momentum_reset)
        if spec.kind == "gaussian":
            return atk.gaussian_attack(sigma, model.dim, config.b_c,
                                       stream(seed, DOMAIN_ATTACK, worker.worker_id, rnd))
        if spec.kind == "label_flip":
            return atk.label_flip_attack(worker, model, n_classes, sigma,
                                         stream(seed, DOMAIN_WORKER, worker.worker_id, rnd),
                                         config.momentum_reset)
        return optimized[j]
    return behave


def _copy_source(benign, config, seed, worker_id, rnd):
    def copy() -> np.ndarray:
        if config.copy_source == "fixed":
            return benign[0].copy()
        pick = int(stream(seed, DOMAIN_ATTACK, worker_id, rnd).integers(len(benign)))
        return benign[pick].copy()
    return copy


def _aggregate(config: ExperimentConfig, server: ServerState, model: MlpModel,
               uploads: list[np.ndarray], eta: float):
    n = server.n
    if config.aggregator == "two_stage":
        result = filter_gradient(uploads, server, model)
        apply_update(server, result.selected_uploads, eta)
        return ([v.passed for v in result.verdicts],
                [float(x) for x in result.score_increments], result.selected)

    if config.aggregator == "none":
        apply_update(server, uploads, eta)
        return [True] * n, [0.0] * n, list(range(n))

    if config.compose_first_stage:
        verdicts = [first_agg_verdict(g, server.sigma, server.b_c) for g in uploads]
        inputs = [g if v.passed else np.zeros_like(g) for g, v in zip(uploads, verdicts)]
        passed = [v.passed for v in verdicts]
    else:
        inputs, passed = uploads, [True] * n

    if config.aggregator == "krum":
        mat = np.asarray(inputs)
        sq = np.sum((mat[:, None, :] - mat[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(sq, np.inf)
        m = n - math.ceil(config.gamma * n) - 2
        if m < 1:
            raise ConfigError(f"krum needs n - ceil(gamma*n) - 2 >= 1, got {m}")
        scores = np.sort(sq, axis=1)[:, :m].sum(axis=1)
        chosen = int(np.argmin(scores))
        aggregate, selected = mat[chosen], [chosen]
    elif config.aggregator == "rfa":
        aggregate, selected = rfa_geometric_median(inputs), list(range(n))
    elif config.aggregator == "cm":
        aggregate, selected = coordinate_median(inputs), list(range(n))
    else:  # tm
        aggregate, selected = trimmed_mean(inputs, config.gamma), list(range(n))
    model.params -= eta * aggregate
    return passed, [0.0] * n, selected


# ---------------------------------------------------------------------------
# Metrics files
# ---------------------------------------------------------------------------


def emit_metrics(result: ExperimentResult, out_dir: str | Path) -> tuple[Path, Path]:
    """Write metrics.jsonl (one object per round) and a one-row summary.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonl_path = out / "metrics.jsonl"
    csv_path = out / "summary.csv"

    with jsonl_path.open("w") as fh:
        for trace in result.traces:
            rejected = [i for i, ok in enumerate(trace.verdicts) if not ok]
            fh.write(json.dumps({
                "round": trace.round_index,
                "accuracy": trace.accuracy,
                "selected": trace.selected,
                "rejected_first_stage": rejected,
                "scores": trace.scores,
            }) + "\n")

    header = "config_hash,final_accuracy,selection_precision,selection_recall\n"
    with csv_path.open("w") as fh:
        fh.write(header)
        if result.traces:
            honest = set(np.flatnonzero(result.honest_mask).tolist())
            precisions, recalls = [], []
            for trace in result.traces:
                hits = len(honest.intersection(trace.selected))
                precisions.append(hits / len(trace.selected) if trace.selected else 0.0)
                recalls.append(hits / len(honest))
            fh.write(f"{result.config.config_hash()},{result.final_accuracy:.6f},"
                     f"{float(np.mean(precisions)):.6f},{float(np.mean(recalls)):.6f}\n")
    return jsonl_path, csv_path
