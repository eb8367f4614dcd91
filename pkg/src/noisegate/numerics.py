"""Deterministic RNG streams and flat-vector primitives.

Every random draw in the simulator goes through a generator keyed by
(master_seed, stream_id).  Streams are independent of each other and of the
order in which they are opened, so a run is a pure function of its config and
seed.  Parameter vectors are plain 1-D float64 numpy arrays throughout.
"""

from __future__ import annotations

import math

import numpy as np

# Stream-id domains.  Worker/attacker streams are keyed per (worker, round);
# server-side draws (init, data synthesis, partitioning, aux sampling) use the
# reserved domains so they can never collide with a worker stream.
DOMAIN_WORKER = 0
DOMAIN_ATTACK = 1
DOMAIN_SERVER = 2
DOMAIN_DATA = 3


def stream(master_seed: int, *stream_id: int) -> np.random.Generator:
    """Open the generator keyed by (master_seed, stream_id).

    The same key always replays the same draw sequence; distinct keys give
    statistically independent streams regardless of creation order.
    """
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(stream_id))
    return np.random.Generator(np.random.PCG64(ss))


def gaussian_vector(rng: np.random.Generator, dim: int, sigma: float) -> np.ndarray:
    """Draw an i.i.d. N(0, sigma^2) vector of length dim."""
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ValueError(f"dim must be a positive integer, got {dim!r}")
    if not math.isfinite(sigma) or sigma < 0:
        raise ValueError(f"sigma must be finite and non-negative, got {sigma!r}")
    return rng.standard_normal(dim) * sigma


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def inner(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))
