"""Poisson-Tweedie distribution: pmf, moments, moment estimators, sampling.

The Poisson-Tweedie (PT) family is a three-parameter discrete distribution
with mean mu > 0, dispersion D >= 1 (variance-to-mean ratio) and power
a <= 1.  It arises as a Poisson mixture over a Tweedie density and contains
several classical count distributions as special cases:

    Poisson                   a = 1, D = 1   (and any a when D = 1)
    negative binomial         a = 0
    Poisson-inverse Gaussian  a = 0.5
    Polya-Aeppli              a = -1
    Neyman type A             a -> -inf

Internally the family is handled through the probability generating
function G(s) = exp{(b/a)[(1-c)^a - (1-cs)^a]} with

    c = (D - 1) / (D - a)          (geometric tail-decay rate, 0 <= c < 1)
    b = mu (1-c)^(1-a) / c

from which mean = mu and variance = D * mu hold exactly for every a.
Probabilities satisfy the positive-term recursion

    (k+1) p_{k+1} = mu * sum_{j=0..k} rho_j p_{k-j}

where rho_j = (1-c)^(1-a) c^j Gamma(j+1-a) / (Gamma(1-a) j!) and
sum_j rho_j = 1.  The recursion is carried in log space (one log-sum-exp
per step) so that probabilities far below the floating-point underflow
threshold remain usable; counts up to at least 1e5 are supported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "PtParams",
    "PtDomainError",
    "PmfEvaluationError",
    "SamplingError",
    "MomentEstimates",
    "pt_pmf",
    "pt_log_pmf",
    "pt_log_pmf_vector",
    "pt_pmf_vector",
    "pt_moments",
    "pt_mom_estimates",
    "pt_sample",
    "A_PROFILE_GRID",
    "A_MIN",
    "EPS_D",
]

# Power values below A_MIN are numerically indistinguishable from the
# Neyman type A limit; the method-of-moments estimator clamps there.
A_MIN = -50.0
# Floor above the D = 1 boundary used to keep dispersion estimates in the
# open interior during optimization.
EPS_D = 1e-6
# Grid scanned by the profile-likelihood initializer for the power.
A_PROFILE_GRID = (-10.0, -5.0, -2.0, -1.0, -0.5, 0.0, 0.25, 0.5, 0.75)


class PtDomainError(ValueError):
    """Raised when (mu, D, a) violate the Poisson-Tweedie domain."""


class PmfEvaluationError(ArithmeticError):
    """Raised when the pmf recursion produces a non-finite value.

    Attributes:
        k: count at which the recursion failed.
    """

    def __init__(self, k, message):
        super().__init__(message)
        self.k = k


class SamplingError(RuntimeError):
    """Raised when the cumulative pmf cannot cover the requested mass."""


@dataclass(frozen=True)
class PtParams:
    """Parameter triple of a Poisson-Tweedie distribution.

    Attributes:
        mean: expected count mu, > 0.
        dispersion: variance-to-mean ratio D, >= 1.
        power: shape parameter a, <= 1; a = 1 only together with D = 1
            (the Poisson corner).
    """

    mean: float
    dispersion: float
    power: float

    def __post_init__(self):
        m, d, a = self.mean, self.dispersion, self.power
        if not (np.isfinite(m) and m > 0):
            raise PtDomainError(f"mean must be a positive real, got {m}")
        if not (np.isfinite(d) and d >= 1.0):
            raise PtDomainError(f"dispersion must be >= 1, got {d}")
        if not (np.isfinite(a) and a <= 1.0):
            raise PtDomainError(f"power must be <= 1, got {a}")
        if a == 1.0 and d != 1.0:
            raise PtDomainError(
                f"power = 1 is the Poisson corner and requires dispersion = 1, got D = {d}"
            )

    @property
    def tail_decay(self) -> float:
        """Geometric rate c = (D-1)/(D-a) of the far-tail pmf ratio."""
        if self.dispersion == 1.0:
            return 0.0  # Poisson corner, including the a = 1 / D = 1 point
        return (self.dispersion - 1.0) / (self.dispersion - self.power)

    @property
    def zero_rate(self) -> float:
        """kappa such that P(Y = 0) = exp(-mean * kappa)."""
        return zero_rate(self.tail_decay, self.power)


def zero_rate(c: float, a: float) -> float:
    """Per-unit-mean exponential rate of the zero probability.

    P(0) = exp(-mu * kappa) with kappa = -[(1-c)^a - 1] (1-c)^(1-a) / (a c);
    the a -> 0 (negative binomial) and c -> 0 (Poisson) limits are exact.
    """
    if c == 0.0:
        return 1.0
    if a == 0.0:
        return -np.log1p(-c) * (1.0 - c) / c
    return -np.expm1(a * np.log1p(-c)) * (1.0 - c) ** (1.0 - a) / (a * c)


def log_conv_coeffs(c: float, a: float, kmax: int) -> np.ndarray:
    """Log of the recursion coefficients rho_0 .. rho_kmax.

    rho_j = (1-c)^(1-a) c^j Gamma(j+1-a) / (Gamma(1-a) j!); the coefficients
    are a probability sequence (they sum to 1 for 0 < c < 1).
    """
    j = np.arange(kmax + 1, dtype=float)
    return (
        (1.0 - a) * np.log1p(-c)
        + j * np.log(c)
        + gammaln(j + 1.0 - a)
        - gammaln(1.0 - a)
        - gammaln(j + 1.0)
    )


def pt_log_pmf_vector(params: PtParams, kmax: int) -> np.ndarray:
    """Log pmf at every count 0..kmax via the log-space recursion.

    This is the reference evaluation path: each recursion step is a
    log-sum-exp over all previous terms, so the result stays finite for
    probabilities far below the double-precision underflow threshold.

    Args:
        params: distribution parameters.
        kmax: largest count to evaluate, >= 0.

    Returns:
        Array of shape (kmax+1,) with log P(Y = k).

    Raises:
        PmfEvaluationError: if a non-finite value appears despite the
            log-space evaluation.
    """
    if kmax < 0:
        raise ValueError("kmax must be >= 0")
    mu = params.mean
    c = params.tail_decay
    out = np.empty(kmax + 1)
    if c == 0.0:
        # Poisson corner: the recursion degenerates to p_{k+1} = mu p_k/(k+1).
        out[0] = -mu
        if kmax > 0:
            k = np.arange(1, kmax + 1, dtype=float)
            out[1:] = -mu + np.cumsum(np.log(mu) - np.log(k))
        return out
    log_r = log_conv_coeffs(c, params.power, max(kmax - 1, 0)) + np.log(mu)
    out[0] = -mu * params.zero_rate
    buf = np.empty(kmax + 1)
    for k in range(kmax):
        v = buf[: k + 1]
        np.add(log_r[: k + 1], out[k::-1], out=v)
        m = v.max()
        if not np.isfinite(m):
            raise PmfEvaluationError(k + 1, f"pmf recursion lost precision at count {k + 1}")
        out[k + 1] = m + np.log(np.exp(v - m, out=v).sum()) - np.log(k + 1.0)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out))[0])
        raise PmfEvaluationError(bad, f"pmf recursion produced a non-finite value at count {bad}")
    return out


def pt_pmf_vector(params: PtParams, kmax: int) -> np.ndarray:
    """Pmf at every count 0..kmax (exp of the log-space recursion)."""
    return np.exp(pt_log_pmf_vector(params, kmax))


def pt_log_pmf(k, params: PtParams):
    """Log P(Y = k) for scalar or array-like nonnegative integer k."""
    karr = np.asarray(k)
    if np.any(karr < 0) or not np.issubdtype(karr.dtype, np.integer) and np.any(karr != np.floor(karr)):
        raise ValueError("counts must be nonnegative integers")
    kmax = int(np.max(karr))
    lp = pt_log_pmf_vector(params, kmax)
    out = lp[karr.astype(np.int64)]
    return float(out) if np.isscalar(k) or karr.ndim == 0 else out


def pt_pmf(k, params: PtParams):
    """P(Y = k) for scalar or array-like nonnegative integer k."""
    out = np.exp(pt_log_pmf(k, params))
    return float(out) if np.isscalar(k) else out


def pt_moments(params: PtParams) -> tuple[float, float]:
    """Mean and variance of the distribution.

    Exact under the adopted parameterization: (mu, D * mu).  The identity
    variance = mu + mu c (1-a)/(1-c) with c = (D-1)/(D-a) reduces to D*mu
    for every admissible power, which the tests cross-check against
    truncated pmf sums.
    """
    return params.mean, params.dispersion * params.mean


@dataclass(frozen=True)
class MomentEstimates:
    """Method-of-moments style estimates of (mean, dispersion, power)."""

    mean: float
    dispersion: float
    power: float
    degenerate: bool = False

    def as_params(self) -> PtParams:
        return PtParams(self.mean, self.dispersion, self.power)


def profile_power(sample: np.ndarray, mean: float, dispersion: float,
                  grid=A_PROFILE_GRID) -> float:
    """Power estimate by one-dimensional profile scoring.

    Evaluates the PT log likelihood of the sample at the fixed
    (mean, dispersion) over the grid of candidate powers and returns the
    argmax, clamped to [A_MIN, 1).
    """
    y = np.asarray(sample, dtype=np.int64)
    kmax = int(y.max())
    best_a, best_ll = None, -np.inf
    for a in grid:
        d = dispersion if a < 1.0 else 1.0
        try:
            lp = pt_log_pmf_vector(PtParams(mean, d, a), kmax)
        except (PtDomainError, PmfEvaluationError):
            continue
        ll = float(lp[y].sum())
        if ll > best_ll:
            best_a, best_ll = a, ll
    if best_a is None:
        best_a = 0.0
    return float(np.clip(best_a, A_MIN, 1.0 - 1e-12))


def pt_mom_estimates(sample) -> MomentEstimates:
    """Moment estimates of (mean, dispersion) plus profile-scored power.

    Args:
        sample: at least 3 nonnegative integer counts.

    Returns:
        MomentEstimates; a sample with zero variance yields
        (mean, 1 + EPS_D, 0) with the ``degenerate`` flag set.
    """
    y = np.asarray(sample, dtype=np.int64)
    if y.size < 3:
        raise ValueError("need at least 3 observations for moment estimation")
    if np.any(y < 0):
        raise ValueError("counts must be nonnegative")
    mean = float(y.mean())
    var = float(y.var(ddof=1))
    if var <= 0.0 or mean <= 0.0:
        return MomentEstimates(max(mean, EPS_D), 1.0 + EPS_D, 0.0, degenerate=True)
    disp = max(1.0 + EPS_D, var / mean)
    power = profile_power(y, mean, disp)
    return MomentEstimates(mean, disp, power)


def _support_for_mass(params: PtParams, tol: float, max_support: int) -> tuple[np.ndarray, int]:
    """Pmf vector truncated where cumulative mass reaches 1 - tol."""
    mu, d = params.mean, params.dispersion
    kmax = int(mu + 20.0 * np.sqrt(d * mu) + 64.0)
    while True:
        pmf = pt_pmf_vector(params, kmax)
        if pmf.sum() >= 1.0 - tol:
            return pmf, kmax
        if kmax >= max_support:
            raise SamplingError(
                f"cumulative pmf reached only {pmf.sum():.15f} at support {kmax}"
            )
        kmax = min(2 * kmax, max_support)


def pt_sample(params: PtParams, n: int, seed, max_support: int = 2_000_000) -> np.ndarray:
    """Draw n values by inversion of the cumulative pmf.

    The cumulative pmf is evaluated once (with on-demand tail extension
    until it covers 1 - 1e-12 of the mass and every drawn uniform) and the
    draws are placed by binary search, so the marginal law is exactly the
    recursion pmf.  Deterministic for a given seed.

    Args:
        params: distribution parameters.
        n: number of draws, >= 1.
        seed: anything accepted by numpy.random.default_rng.
        max_support: hard cap on the tail extension.

    Raises:
        SamplingError: if the cumulative mass cannot reach 1 - 1e-12
            within max_support.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    pmf, kmax = _support_for_mass(params, 1e-12, max_support)
    cdf = np.cumsum(pmf)
    while u.max() > cdf[-1]:
        if kmax >= max_support:
            raise SamplingError(f"a draw fell beyond the covered support {kmax}")
        kmax = min(2 * kmax, max_support)
        cdf = np.cumsum(pt_pmf_vector(params, kmax))
    return np.searchsorted(cdf, u, side="left").astype(np.int64)
