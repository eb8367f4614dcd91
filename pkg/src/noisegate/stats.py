"""Statistical tests used by the server-side upload filter.

A benign upload is, after scaling, an i.i.d. N(0, sigma^2) vector plus a small
signal term.  The filter checks two things: the squared norm lies in the
3-sigma chi-square band around sigma^2*d, and the empirical coordinate
distribution is close to the zero-mean Gaussian in Kolmogorov-Smirnov
distance.  Both checks, and the per-coordinate resilience intervals implied by
a KS bound, live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

KS_SERIES_TOL = 1e-12
KS_SERIES_MAX_TERMS = 100_000


def normal_cdf(x, sigma: float):
    """CDF of N(0, sigma^2) at x (scalar or array)."""
    if not math.isfinite(sigma) or sigma <= 0:
        raise ValueError(f"sigma must be finite and positive, got {sigma!r}")
    out = special.ndtr(np.asarray(x, dtype=np.float64) / sigma)
    return float(out) if np.isscalar(x) else out


@dataclass(frozen=True)
class NormTestBounds:
    """Band for the l2 norm of an unaveraged noisy sum in R^d."""

    lower: float
    upper: float

    def contains(self, norm: float) -> bool:
        return self.lower <= norm <= self.upper


def norm_test_bounds(sigma: float, d: int) -> NormTestBounds:
    """Bounds sqrt(sigma^2*d -/+ 3*sigma^2*sqrt(2d)) on the norm of N(0, sigma^2 I_d).

    Requires d > 18 so the lower endpoint is real (d^2 > 18d).
    """
    if not math.isfinite(sigma) or sigma <= 0:
        raise ValueError(f"sigma must be finite and positive, got {sigma!r}")
    if d <= 18:
        raise ValueError(f"norm test needs d > 18 for a real lower bound, got d={d}")
    half_width = 3.0 * sigma * sigma * math.sqrt(2.0 * d)
    center = sigma * sigma * d
    return NormTestBounds(math.sqrt(center - half_width), math.sqrt(center + half_width))


def ks_statistic(v: np.ndarray, sigma: float) -> float:
    """Exact sup-distance between the ECDF of v and the N(0, sigma^2) CDF.

    With sorted coordinates x_1 <= ... <= x_d the supremum is attained at a
    jump: D = max_k max(k/d - F(x_k), F(x_k) - (k-1)/d).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("ks_statistic expects a non-empty 1-D vector")
    d = v.size
    xs = np.sort(v)
    cdf = normal_cdf(xs, sigma)
    k = np.arange(1, d + 1, dtype=np.float64)
    d_plus = np.max(k / d - cdf)
    d_minus = np.max(cdf - (k - 1.0) / d)
    return float(max(d_plus, d_minus, 0.0))


def kolmogorov_pvalue(statistic: float, d: int) -> float:
    """Asymptotic two-sided KS p-value: Q(lam) = 2*sum_k (-1)^(k-1) exp(-2 k^2 lam^2).

    lam = sqrt(d)*statistic.  The series is truncated once a term drops below
    1e-12; the result is clamped to [0, 1].  For lam ~ 0 every term is ~1 and
    the series cannot terminate, so p = 1 is returned directly.
    """
    if statistic < 0 or d < 1:
        raise ValueError("need statistic >= 0 and d >= 1")
    lam = math.sqrt(d) * statistic
    if lam < 1e-8:
        return 1.0
    total = 0.0
    for k in range(1, KS_SERIES_MAX_TERMS + 1):
        term = math.exp(-2.0 * k * k * lam * lam)
        total += term if k % 2 == 1 else -term
        if term < KS_SERIES_TOL:
            break
    return min(1.0, max(0.0, 2.0 * total))


@dataclass(frozen=True)
class KsVerdict:
    statistic: float
    p_value: float
    passed: bool  # significance-level semantics: p_value >= 0.05


def ks_verdict(v: np.ndarray, sigma: float, alpha: float = 0.05) -> KsVerdict:
    """KS test of v against N(0, sigma^2) at significance level alpha."""
    stat = ks_statistic(v, sigma)
    p = kolmogorov_pvalue(stat, len(v))
    return KsVerdict(stat, p, p >= alpha)


@dataclass(frozen=True)
class ResilienceInterval:
    """Admissible range for the k-th sorted coordinate under a KS bound."""

    lower: float
    upper: float
    empty: bool


def resilience_interval(k: int, d: int, sigma: float, d_crit: float) -> ResilienceInterval:
    """Interval the k-th order statistic (1-based) must occupy when D_KS <= d_crit.

    Inverts the CDF envelopes E_u = min(1, F + d_crit) and E_l = max(0, F - d_crit):
    the interval is [E_u^{-1}(k/d), E_l^{-1}((k-1)/d)], with an endpoint at
    -inf/+inf where the corresponding envelope saturates.
    """
    if not 1 <= k <= d:
        raise ValueError(f"order statistic index k={k} outside 1..{d}")
    if d_crit < 0:
        raise ValueError("d_crit must be non-negative")
    p_lo = k / d - d_crit
    p_hi = (k - 1) / d + d_crit
    lower = sigma * float(special.ndtri(p_lo)) if p_lo > 0.0 else -math.inf
    upper = sigma * float(special.ndtri(p_hi)) if p_hi < 1.0 else math.inf
    return ResilienceInterval(lower, upper, empty=lower > upper)
