"""Statistical primitives used by Monte Carlo certification.

Everything here is a pure function of its arguments. Binomial tails are
summed exactly in log space over a cached log-factorial table, so the
bounds stay exact at certification sample sizes (n up to a few 1e5)
without leaning on incomplete-beta special functions.
"""
from __future__ import annotations

import math
import threading

import numpy as np

# Largest probability pushed through the quantile by the radius helpers.
P_CLAMP = 1.0 - 1e-12

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Acklam's rational approximation, lower region and central region.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def norm_cdf(x: float) -> float:
    """Standard normal CDF via ``erfc`` (accurate in the lower tail)."""
    return 0.5 * math.erfc(-x / _SQRT2)


def norm_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def _initial_quantile(p: float) -> float:
    # only called with p <= 0.5
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        return num / den
    q = p - 0.5
    r = q * q
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def std_normal_quantile(p: float) -> float:
    """Inverse standard normal CDF.

    A rational initial guess is polished with up to three Newton steps
    against :func:`norm_cdf`. Values above one half are mapped through the
    lower half (``1 - p`` is exact there), which makes the result exactly
    antisymmetric.

    Raises:
        ValueError: if ``p`` is not strictly inside (0, 1).
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile needs 0 < p < 1, got {p!r}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -std_normal_quantile(1.0 - p)
    x = _initial_quantile(p)
    for _ in range(3):
        err = norm_cdf(x) - p
        if abs(err) <= 1e-12 * p:
            break
        x -= err / norm_pdf(x)
    return x


_lf_lock = threading.Lock()
_lf_table = np.zeros(1)


def log_factorials(n: int) -> np.ndarray:
    """Return ``log(k!)`` for ``k = 0..n`` from a shared, growing table."""
    global _lf_table
    table = _lf_table
    if len(table) > n:
        return table
    with _lf_lock:
        if len(_lf_table) <= n:
            size = max(n + 1, 2 * len(_lf_table))
            _lf_table = np.array([math.lgamma(k + 1.0) for k in range(size)])
        return _lf_table


def _check_count(k: int, n: int) -> None:
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"invalid binomial count k={k}, n={n}")


def _logsumexp(terms: np.ndarray) -> float:
    m = float(np.max(terms))
    if m == -math.inf:
        return -math.inf
    return m + math.log(float(np.sum(np.exp(terms - m))))


def log_binom_sf(k: int, n: int, p: float) -> float:
    """``log P[Bin(n, p) >= k]`` by exact summation of the upper tail."""
    _check_count(k, n)
    if k == 0:
        return 0.0
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return 0.0
    lf = log_factorials(n)
    j = np.arange(k, n + 1)
    terms = lf[n] - lf[j] - lf[n - j] + j * math.log(p) + (n - j) * math.log1p(-p)
    return min(0.0, _logsumexp(terms))


def binom_sf(k: int, n: int, p: float) -> float:
    return math.exp(log_binom_sf(k, n, p))


def clopper_pearson_lower(k: int, n: int, alpha: float, tol: float = 1e-12) -> float:
    """One-sided exact lower confidence bound for a binomial proportion.

    Bisects for the largest ``p`` with ``P[Bin(n, p) >= k] <= alpha``. The
    returned end of the bracket is the conservative one.
    """
    _check_count(k, n)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    if k == 0:
        return 0.0
    log_alpha = math.log(alpha)
    lo, hi = 0.0, 1.0
    if k == n:
        # the tail is a single term p**n; start from a tight bracket
        guess = alpha ** (1.0 / n)
        lo, hi = max(0.0, guess - 1e-6), min(1.0, guess + 1e-6)
        if log_binom_sf(k, n, lo) > log_alpha:
            lo = 0.0
        if log_binom_sf(k, n, hi) <= log_alpha:
            hi = 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if log_binom_sf(k, n, mid) <= log_alpha:
            lo = mid
        else:
            hi = mid
    return lo


def clopper_pearson_upper(k: int, n: int, alpha: float, tol: float = 1e-12) -> float:
    """Mirror image of :func:`clopper_pearson_lower`: ``1 - lower(n - k)``."""
    _check_count(k, n)
    return 1.0 - clopper_pearson_lower(n - k, n, alpha, tol)


def binom_two_sided_pvalue(k: int, n: int) -> float:
    """Exact two-sided p-value of ``k`` successes in ``n`` fair coin flips."""
    _check_count(k, n)
    tail = max(k, n - k)
    lf = log_factorials(n)
    j = np.arange(tail, n + 1)
    terms = lf[n] - lf[j] - lf[n - j] - n * math.log(2.0)
    return min(1.0, 2.0 * math.exp(_logsumexp(terms)))


def _clamp(p: float) -> float:
    return min(max(p, 1.0 - P_CLAMP), P_CLAMP)


def certified_radius_one_sided(p_lower: float, sigma: float) -> float:
    """``sigma * Phi^-1(p_lower)`` for a top-class bound above one half."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    if not p_lower > 0.5:
        raise ValueError(f"one-sided radius needs p_lower > 1/2, got {p_lower!r}")
    return sigma * std_normal_quantile(_clamp(p_lower))


def certified_radius_two_class(p_a: float, p_b: float, sigma: float) -> float:
    """``sigma / 2 * (Phi^-1(p_a) - Phi^-1(p_b))`` for ``p_a >= p_b``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    if p_a < p_b:
        raise ValueError(f"two-class radius needs p_a >= p_b, got {p_a!r} < {p_b!r}")
    if p_a == p_b:
        return 0.0
    return 0.5 * sigma * (std_normal_quantile(_clamp(p_a)) - std_normal_quantile(_clamp(p_b)))
