"""Regularized incomplete gamma and chi-square tail probabilities.

The chi-square cdf is evaluated through the regularized lower incomplete
gamma P(s, x) with the classic series / continued-fraction split at
x = s + 1: the power series for the lower function on the left, a
modified Lentz evaluation of the continued fraction for the upper
function on the right.  Relative accuracy is ~1e-14 over the ranges used
by the tests (cross-checked against scipy and mpmath).
"""

from __future__ import annotations

import math

from scipy.special import gammaln

__all__ = ["gamma_p", "gamma_q", "chi2_sf", "chi2_cdf"]

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _gamma_p_series(s: float, x: float) -> float:
    """Lower regularized gamma by power series (x < s + 1)."""
    term = 1.0 / s
    total = term
    denom = s
    for _ in range(_MAX_ITER):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + s * math.log(x) - gammaln(s))


def _gamma_q_contfrac(s: float, x: float) -> float:
    """Upper regularized gamma by continued fraction (x >= s + 1)."""
    # modified Lentz algorithm for the continued fraction
    # x + 1 - s - 1*(1-s)/(x+3-s-...) form
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + s * math.log(x) - gammaln(s))


def gamma_p(s: float, x: float) -> float:
    """Regularized lower incomplete gamma P(s, x)."""
    if s <= 0:
        raise ValueError(f"shape must be positive, got {s}")
    if x < 0:
        raise ValueError(f"argument must be nonnegative, got {x}")
    if x == 0.0:
        return 0.0
    if x < s + 1.0:
        return min(1.0, _gamma_p_series(s, x))
    return max(0.0, 1.0 - _gamma_q_contfrac(s, x))


def gamma_q(s: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(s, x) = 1 - P(s, x)."""
    if s <= 0:
        raise ValueError(f"shape must be positive, got {s}")
    if x < 0:
        raise ValueError(f"argument must be nonnegative, got {x}")
    if x == 0.0:
        return 1.0
    if x < s + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(s, x))
    return min(1.0, _gamma_q_contfrac(s, x))


def chi2_sf(x: float, df: float) -> float:
    """Chi-square upper tail P(X > x) with df > 0 degrees of freedom."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if x <= 0.0:
        return 1.0
    return gamma_q(0.5 * df, 0.5 * x)


def chi2_cdf(x: float, df: float) -> float:
    """Chi-square lower tail P(X <= x)."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if x <= 0.0:
        return 0.0
    return gamma_p(0.5 * df, 0.5 * x)
