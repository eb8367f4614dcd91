"""Byzantine upload strategies and the time-to-begin-Byzantine wrapper.

Every attack emits vectors in the honest wire format (noise-dominated,
batch-averaged) so they cannot be spotted by magnitude alone.  The adaptive
wrapper makes any attack start out as a copy of an honest upload and turn
malicious only from a configured fraction of the round budget onward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .dp_engine import WorkerState, honest_upload
from .model import MlpModel
from .numerics import gaussian_vector

ATTACK_KINDS = ("none", "gaussian", "label_flip", "optimized_local")


class AttackInfeasibleError(ValueError):
    """The attack's feasibility condition does not hold for this population."""


@dataclass(frozen=True)
class AttackSpec:
    """What the Byzantine workers do and when they start doing it."""

    kind: str = "none"
    ttbb: float = 0.0                    # fraction of rounds spent mimicking
    lambda_override: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        if not 0.0 <= self.ttbb <= 1.0:
            raise ValueError(f"ttbb must be in [0, 1], got {self.ttbb!r}")


def gaussian_attack(sigma: float, dim: int, b_c: int, rng: np.random.Generator) -> np.ndarray:
    """Pure wire-format noise: (1/b_c) * N(0, sigma^2 I_dim)."""
    if b_c < 1:
        raise ValueError("b_c must be positive")
    return gaussian_vector(rng, dim, sigma) / b_c


def label_flip_attack(worker: WorkerState, model: MlpModel, n_classes: int, sigma: float,
                      rng: np.random.Generator, momentum_mode: str = "paper_literal") -> np.ndarray:
    """Honest pipeline on a label-poisoned shard (label -> n_classes - 1 - label)."""
    poisoned = replace(worker, labels=n_classes - 1 - worker.labels)
    return honest_upload(poisoned, model, sigma, rng, momentum_mode)


def optimized_attack(benign_uploads: list[np.ndarray], n_malicious: int,
                     lam: float | None = None) -> list[np.ndarray]:
    """Coordinated anti-aggregate: each malicious upload is -((1+lam)/M) * sum(benign).

    With the default lam = M/sqrt(B) - 1 the combined malicious mass flips the
    sign of the benign aggregate while each individual upload keeps honest
    wire statistics.  Requires M > sqrt(B) for the default scaling to be an
    actual attack (lam > 0).
    """
    b_m = len(benign_uploads)
    if b_m < 1:
        raise ValueError("need at least one benign upload")
    if n_malicious < 1:
        raise ValueError("need at least one malicious worker")
    if n_malicious <= math.sqrt(b_m):
        raise AttackInfeasibleError(
            f"optimized attack needs n_malicious > sqrt(n_benign): "
            f"{n_malicious} <= sqrt({b_m}) = {math.sqrt(b_m):.3f}")
    if lam is None:
        lam = n_malicious / math.sqrt(b_m) - 1.0
    total = np.sum(benign_uploads, axis=0)
    template = -((1.0 + lam) / n_malicious) * total
    return [template.copy() for _ in range(n_malicious)]


def adaptive_wrap(spec: AttackSpec, round_index: int, total_rounds: int,
                  inner_behavior: Callable[[], np.ndarray],
                  honest_copy_source: Callable[[], np.ndarray]) -> np.ndarray:
    """Copy an honest upload before round ttbb*T, delegate to the attack after."""
    if not 0 <= round_index < total_rounds:
        raise ValueError(f"round {round_index} outside 0..{total_rounds - 1}")
    if round_index < spec.ttbb * total_rounds:
        return honest_copy_source()
    return inner_behavior()
