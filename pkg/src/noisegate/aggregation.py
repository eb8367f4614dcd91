"""Server-side aggregation: the two-stage statistical filter and baselines.

Stage one checks each upload's wire statistics (norm band + KS distance)
against what the injected DP noise should look like and zeroes anything that
fails.  Stage two scores survivors by inner product with a gradient on a tiny
trusted auxiliary batch, suppresses low scores, accumulates them across
rounds, and keeps the top gamma fraction.  Classic robust aggregators are
included as baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import MlpModel
from .numerics import inner
from .stats import ks_statistic, kolmogorov_pvalue, norm_test_bounds

# Stage-one KS gate: reject when the KS *statistic* exceeds this bound.  The
# band this induces on each sorted coordinate is the resilience interval at
# d_crit = 0.05; pure wire-format noise passes with probability ~1 while
# degenerate uploads (constant vectors, large shifts) are rejected.
FIRST_AGG_KS_THRESHOLD = 0.05


@dataclass
class ServerState:
    """Global model, accumulated scores, and the trusted auxiliary batch."""

    model: MlpModel
    n: int                       # enrolled worker count (update divisor)
    gamma: float                 # believed honest fraction, in (0, 1]
    sigma: float                 # noise multiplier workers were told to use
    b_c: int                     # per-round batch size (wire-format scale)
    aux_features: np.ndarray
    aux_labels: np.ndarray
    scores: np.ndarray = field(default=None)  # type: ignore[assignment]
    clamp_scores: bool = False

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("need at least one worker")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma!r}")
        if len(self.aux_labels) == 0:
            raise ValueError("auxiliary batch must be non-empty")
        if self.scores is None:
            self.scores = np.zeros(self.n, dtype=np.float64)


@dataclass(frozen=True)
class FirstAggVerdict:
    passed: bool
    norm_ok: bool
    ks_statistic: float
    ks_p_value: float


def first_agg_verdict(g: np.ndarray, sigma: float, b_c: int) -> FirstAggVerdict:
    """Stage-one checks on the unaveraged sum b_c * g against N(0, sigma^2 I)."""
    if b_c < 1:
        raise ValueError("b_c must be positive")
    u = np.asarray(g, dtype=np.float64) * b_c
    bounds = norm_test_bounds(sigma, u.size)
    norm_ok = bounds.contains(float(np.linalg.norm(u)))
    stat = ks_statistic(u, sigma)
    p = kolmogorov_pvalue(stat, u.size)
    return FirstAggVerdict(norm_ok and stat <= FIRST_AGG_KS_THRESHOLD, norm_ok, stat, p)


def first_agg(g: np.ndarray, sigma: float, b_c: int) -> np.ndarray:
    """Return g unchanged if its wire statistics are plausible, else zeros."""
    g = np.asarray(g, dtype=np.float64)
    if first_agg_verdict(g, sigma, b_c).passed:
        return g
    return np.zeros_like(g)


def selection_size(gamma: float, n: int) -> int:
    return math.ceil(gamma * n)


def score_round(s_tmp: np.ndarray, scores: np.ndarray, gamma: float,
                clamp: bool = False) -> tuple[np.ndarray, list[int], float]:
    """Suppress sub-threshold scores, accumulate, and pick the trusted set.

    mu_hat is the mean of the ceil(gamma*n) largest round scores; entries
    below it are zeroed before being added to the running totals.  Returns
    (increments, selected indices ascending, mu_hat); ties in the totals
    resolve toward the lowest worker index.
    """
    n = len(s_tmp)
    if len(scores) != n:
        raise ValueError("round scores and accumulated scores must align")
    m = selection_size(gamma, n)
    top = np.partition(s_tmp, n - m)[n - m:]
    mu_hat = float(top.mean())
    increments = np.where(s_tmp < mu_hat, 0.0, s_tmp)
    if clamp:
        increments = np.maximum(increments, 0.0)
    scores += increments
    order = np.lexsort((np.arange(n), -scores))
    selected = sorted(int(i) for i in order[:m])
    return increments, selected, mu_hat


@dataclass
class FilterResult:
    """Outcome of one filtering round."""

    selected: list[int]                 # worker indices, ascending
    filtered: list[np.ndarray]          # uploads after stage one (zeroed or intact)
    verdicts: list[FirstAggVerdict]
    score_increments: np.ndarray        # post-suppression additions to server.scores
    mu_hat: float

    @property
    def selected_uploads(self) -> list[np.ndarray]:
        return [self.filtered[i] for i in self.selected]


def filter_gradient(uploads: list[np.ndarray], server: ServerState, model: MlpModel) -> FilterResult:
    """Two-stage filter: wire-statistics gate, then accumulated trust scores.

    Mutates server.scores.  Selection takes the ceil(gamma*n) workers with the
    largest accumulated scores, ties broken toward the lowest index.
    """
    n = server.n
    if len(uploads) != n:
        raise ValueError(f"got {len(uploads)} uploads for {n} enrolled workers")
    verdicts = [first_agg_verdict(g, server.sigma, server.b_c) for g in uploads]
    filtered = [np.asarray(g, dtype=np.float64) if v.passed else np.zeros_like(g)
                for g, v in zip(uploads, verdicts)]
    g_aux = model.batch_gradient(server.aux_features, server.aux_labels)
    s_tmp = np.array([inner(g, g_aux) for g in filtered])
    increments, selected, mu_hat = score_round(
        s_tmp, server.scores, server.gamma, clamp=server.clamp_scores)
    return FilterResult(selected, filtered, verdicts, increments, mu_hat)


def apply_update(server: ServerState, selected_uploads: list[np.ndarray], eta: float) -> None:
    """w <- w - eta * (1/n) * sum of the selected uploads (n = enrolled workers)."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta!r}")
    if not selected_uploads:
        return
    total = np.sum(selected_uploads, axis=0)
    server.model.params -= (eta / server.n) * total


# ---------------------------------------------------------------------------
# Baseline robust aggregators (operate on raw uploads)
# ---------------------------------------------------------------------------


def _stack(uploads: list[np.ndarray]) -> np.ndarray:
    if not uploads:
        raise ValueError("need at least one upload")
    mat = np.asarray(uploads, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("uploads must share one dimension")
    return mat


def krum(uploads: list[np.ndarray], gamma: float) -> np.ndarray:
    """Upload minimizing the summed squared distance to its nearest peers.

    Each candidate is scored over its n - ceil(gamma*n) - 2 nearest other
    uploads; the lowest-index minimizer wins.
    """
    mat = _stack(uploads)
    n = mat.shape[0]
    m = n - math.ceil(gamma * n) - 2
    if m < 1:
        raise ValueError(f"krum needs n - ceil(gamma*n) - 2 >= 1, got {m} (n={n})")
    sq = np.sum((mat[:, None, :] - mat[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(sq, np.inf)
    scores = np.sort(sq, axis=1)[:, :m].sum(axis=1)
    return mat[int(np.argmin(scores))].copy()


def rfa_geometric_median(uploads: list[np.ndarray], max_iter: int = 100,
                         tol: float = 1e-7) -> np.ndarray:
    """Smoothed Weiszfeld iteration for the geometric median, from the mean."""
    mat = _stack(uploads)
    g = mat.mean(axis=0)
    for _ in range(max_iter):
        dists = np.maximum(np.linalg.norm(mat - g, axis=1), 1e-8)
        weights = 1.0 / dists
        g_next = (weights[:, None] * mat).sum(axis=0) / weights.sum()
        step = float(np.linalg.norm(g_next - g))
        g = g_next
        if step < tol:
            break
    return g


def coordinate_median(uploads: list[np.ndarray]) -> np.ndarray:
    """Coordinate-wise median (mean of the two middle values for even counts)."""
    return np.median(_stack(uploads), axis=0)


def trimmed_mean(uploads: list[np.ndarray], gamma: float) -> np.ndarray:
    """Coordinate-wise mean after dropping the floor(gamma*n) extremes each side."""
    mat = _stack(uploads)
    n = mat.shape[0]
    k = math.floor(gamma * n)
    if n - 2 * k < 1:
        raise ValueError(f"trimming {k} per side leaves no uploads (n={n})")
    sorted_mat = np.sort(mat, axis=0)
    return sorted_mat[k:n - k].mean(axis=0)
