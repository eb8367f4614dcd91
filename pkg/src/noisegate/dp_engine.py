"""Honest worker upload pipeline and the privacy/learning-rate calibration.

The honest upload is a per-slot momentum update, slot-wise normalization, and
a single Gaussian noise injection, all averaged by the batch size.  Noise
scale comes from an RDP accountant for the Poisson-subsampled Gaussian
mechanism; the learning rate is planned from the solved noise multiplier.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .model import MlpModel
from .numerics import gaussian_vector

# Renyi orders: one fractional low order, a dense integer sweep, two high tails.
RDP_ORDERS: tuple[float, ...] = (1.5,) + tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)

SIGMA_BRACKET = (1e-2, 1e2)
SIGMA_TOL = 1e-3

MOMENTUM_MODES = ("paper_literal", "keep_slots")


class InfeasiblePrivacyError(ValueError):
    """The privacy budget cannot be met inside the sigma search bracket."""


# ---------------------------------------------------------------------------
# Worker state and the honest upload
# ---------------------------------------------------------------------------


@dataclass
class WorkerState:
    """A worker's shard, per-slot momentum registers, and declared role."""

    worker_id: int
    features: np.ndarray        # (m, input_dim)
    labels: np.ndarray          # (m,)
    momentum: np.ndarray        # (b_c, model_dim), zero-initialized
    beta: float
    role: str = "honest"

    @classmethod
    def create(cls, worker_id: int, features: np.ndarray, labels: np.ndarray,
               b_c: int, model_dim: int, beta: float, role: str = "honest") -> "WorkerState":
        if b_c < 1:
            raise ValueError("batch size must be positive")
        momentum = np.zeros((b_c, model_dim), dtype=np.float64)
        return cls(worker_id, features, labels, momentum, beta, role)

    @property
    def b_c(self) -> int:
        return self.momentum.shape[0]


def honest_upload(worker: WorkerState, model: MlpModel, sigma: float,
                  rng: np.random.Generator, momentum_mode: str = "paper_literal") -> np.ndarray:
    """One round of the honest pipeline; returns the noisy averaged upload.

    Samples b_c examples without replacement, folds each gradient into its
    momentum slot, sums the normalized slots, adds N(0, sigma^2 I), and
    divides by b_c.  A zero-norm slot contributes the zero vector.  Afterward
    every slot is overwritten with the upload itself (paper_literal) or keeps
    its own momentum (keep_slots).
    """
    if momentum_mode not in MOMENTUM_MODES:
        raise ValueError(f"momentum_mode must be one of {MOMENTUM_MODES}, got {momentum_mode!r}")
    b_c = worker.b_c
    m = len(worker.labels)
    if m < b_c:
        raise ValueError(f"worker {worker.worker_id} holds {m} examples < batch size {b_c}")
    idx = rng.choice(m, size=b_c, replace=False)
    grads = model.per_example_gradients(worker.features[idx], worker.labels[idx])
    phi = (1.0 - worker.beta) * grads + worker.beta * worker.momentum
    norms = np.linalg.norm(phi, axis=1, keepdims=True)
    normalized = np.divide(phi, norms, out=np.zeros_like(phi), where=norms > 0)
    noise = gaussian_vector(rng, model.dim, sigma)
    upload = (normalized.sum(axis=0) + noise) / b_c
    if momentum_mode == "paper_literal":
        worker.momentum[:] = upload
    else:
        worker.momentum[:] = phi
    return upload


# ---------------------------------------------------------------------------
# RDP accountant for the Poisson-subsampled Gaussian mechanism
# ---------------------------------------------------------------------------


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    # log(exp(a) - exp(b)) for a >= b
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    if a < b:
        raise ValueError("log_sub needs a >= b")
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    # erfc(x) = 2*ndtr(-x*sqrt(2)); log_ndtr is stable for large |x|
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _log_binom(n: int, k: int) -> float:
    return float(special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    """log A_alpha for integer alpha via the binomial expansion."""
    log_a = -math.inf
    for k in range(alpha + 1):
        term = (_log_binom(alpha, k) + k * math.log(q) + (alpha - k) * math.log1p(-q)
                + (k * k - k) / (2.0 * sigma * sigma))
        log_a = _log_add(log_a, term)
    return log_a


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    """log A_alpha for fractional alpha via the split-integral series."""
    log_a0 = -math.inf
    log_a1 = -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = float(special.binom(alpha, i))
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 and i > alpha:
            break
        if i > 10_000:  # series always terminates long before this
            break
    return _log_add(log_a0, log_a1)


def rdp_sgm(q: float, sigma: float, alpha: float) -> float:
    """Per-step RDP of the subsampled Gaussian mechanism at order alpha."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"sampling rate q must be in [0, 1], got {q!r}")
    if sigma <= 0 or alpha <= 1:
        raise ValueError("need sigma > 0 and alpha > 1")
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return log_a / (alpha - 1.0)


def accountant_epsilon(sigma: float, q: float, steps: int, delta: float,
                       orders: tuple[float, ...] = RDP_ORDERS,
                       conversion: str = "refined") -> float:
    """(eps, delta) cost of `steps` compositions of the subsampled Gaussian.

    Minimizes over the orders grid.  The default "refined" Renyi-to-DP
    conversion is eps = rdp + ln((alpha-1)/alpha) - (ln(delta) + ln(alpha))/(alpha-1);
    "classic" uses the looser eps = rdp + ln(1/delta)/(alpha-1).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta!r}")
    if conversion not in ("refined", "classic"):
        raise ValueError(f"conversion must be 'refined' or 'classic', got {conversion!r}")
    log_delta = math.log(delta)
    best = math.inf
    for alpha in orders:
        rdp = steps * rdp_sgm(q, sigma, alpha)
        if conversion == "classic":
            eps = rdp - log_delta / (alpha - 1.0)
        else:
            eps = (rdp + math.log((alpha - 1.0) / alpha)
                   - (log_delta + math.log(alpha)) / (alpha - 1.0))
        best = min(best, max(0.0, eps))
    return best


def solve_sigma(epsilon: float, delta: float, q: float, steps: int,
                bracket: tuple[float, float] = SIGMA_BRACKET, tol: float = SIGMA_TOL) -> float:
    """Smallest noise multiplier meeting the (epsilon, delta) budget, via bisection."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon!r}")
    lo, hi = bracket
    if accountant_epsilon(hi, q, steps, delta) > epsilon:
        raise InfeasiblePrivacyError(
            f"budget eps={epsilon} delta={delta} unattainable with sigma <= {hi}")
    if accountant_epsilon(lo, q, steps, delta) <= epsilon:
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if accountant_epsilon(mid, q, steps, delta) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Learning-rate planning
# ---------------------------------------------------------------------------


def plan_learning_rate(base_eta: float, base_sigma: float, sigma: float) -> float:
    """Scale a tuned base step inversely with the noise multiplier."""
    if min(base_eta, base_sigma, sigma) <= 0:
        raise ValueError("base_eta, base_sigma and sigma must all be positive")
    return base_eta * base_sigma / sigma


@dataclass(frozen=True)
class ConvergenceParams:
    """Problem constants for the theoretical step size."""

    initial_gap: float      # F(w0) - F* upper bound
    smoothness: float       # gradient-Lipschitz constant L
    batch_size: int         # b_c
    dim: int                # model dimension d


def theoretical_eta(params: ConvergenceParams, sigma: float, steps: int) -> float:
    """eta = (1/sigma) * sqrt(2 F0 b_c^2 / (T L d)); warns outside the noise-dominant regime."""
    if min(params.initial_gap, params.smoothness, params.batch_size, params.dim) <= 0:
        raise ValueError("convergence parameters must be positive")
    if sigma <= 0 or steps < 1:
        raise ValueError("need sigma > 0 and steps >= 1")
    ratio = sigma * sigma * params.dim / (params.batch_size ** 2)
    if ratio < 10.0:
        warnings.warn(
            f"sigma^2*d/b_c^2 = {ratio:.3g} < 10: outside the noise-dominant regime "
            "the step-size analysis assumes", RuntimeWarning, stacklevel=2)
    return (1.0 / sigma) * math.sqrt(
        2.0 * params.initial_gap * params.batch_size ** 2
        / (steps * params.smoothness * params.dim))
