"""Wald and likelihood ratio testing with FDR adjustment.

Linear hypotheses K beta = b0 are tested with the Wald quadratic form

    w = (K beta_hat - b0)' (K Var(beta_hat) K')^{-1} (K beta_hat - b0)

referred to chi-square with rank(K) degrees of freedom, where
Var(beta_hat) is the fixed-effect block of the inverse observed
information.  Nested model pairs are compared with the likelihood ratio
statistic t = 2 (loglik_full - loglik_null); for a null hypothesis on the
boundary of the parameter space (variance component = 0) the reference
distribution is the equal mixture of chi-square with 0 and 1 degrees of
freedom.  Benjamini-Hochberg step-up adjustment handles multiplicity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .glmm import FitError, FitResult
from .special import chi2_sf

__all__ = [
    "HypothesisSpec",
    "TestResult",
    "TestError",
    "TestRefusedError",
    "wald_test",
    "lr_test",
    "bh_adjust",
]


class TestError(RuntimeError):
    """The test statistic could not be formed (singular middle matrix)."""


class TestRefusedError(RuntimeError):
    """The fit does not support the requested test (e.g. no vcov)."""


@dataclass(frozen=True)
class HypothesisSpec:
    """Linear restriction set H0: K beta = b0.

    K has one row per restriction and one column per fitted coefficient;
    b0 defaults to zeros.
    """

    K: np.ndarray
    b0: np.ndarray | None = None
    name: str = "hypothesis"

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        object.__setattr__(self, "K", K)
        b0 = np.zeros(K.shape[0]) if self.b0 is None else np.asarray(self.b0, dtype=float)
        if b0.shape != (K.shape[0],):
            raise ValueError("b0 must have one entry per restriction row")
        object.__setattr__(self, "b0", b0)
        if np.linalg.matrix_rank(K) < K.shape[0]:
            raise ValueError("restriction matrix must have full row rank")

    @property
    def df(self) -> int:
        return self.K.shape[0]

    @classmethod
    def for_coefficients(cls, names, coef_names, b0=None, name=None):
        """Restrictions picking out named coefficients (each = 0)."""
        names = [names] if isinstance(names, str) else list(names)
        idx = []
        for n in names:
            if n not in coef_names:
                raise ValueError(f"unknown coefficient {n!r}")
            idx.append(coef_names.index(n))
        K = np.zeros((len(idx), len(coef_names)))
        for r, j in enumerate(idx):
            K[r, j] = 1.0
        return cls(K=K, b0=b0, name=name or "=".join(names))


@dataclass(frozen=True)
class TestResult:
    """Outcome of one hypothesis test."""

    statistic: float
    df: object  # int, or ("mixture", dfs, weights) for boundary tests
    p_value: float
    kind: str
    name: str = ""
    flags: dict = field(default_factory=dict)


def wald_test(fit: FitResult, hyp: HypothesisSpec) -> TestResult:
    """Multivariate Wald test of K beta = b0 on a converged fit.

    Raises:
        TestRefusedError: when the fit carries no covariance (non-converged
            or boundary-adjacent estimate).
        TestError: when K Var(beta) K' is singular.
    """
    if not fit.converged:
        raise TestRefusedError("fit did not converge; Wald test refused")
    if fit.vcov is None:
        raise TestRefusedError(
            "no covariance available: " + fit.flags.get("vcov_reason", "unknown reason")
        )
    p = fit.n_coef
    if hyp.K.shape[1] != p:
        raise ValueError(
            f"restriction matrix has {hyp.K.shape[1]} columns but the fit has {p} coefficients"
        )
    diff = hyp.K @ fit.theta_hat.beta - hyp.b0
    middle = hyp.K @ fit.beta_cov() @ hyp.K.T
    try:
        sol = np.linalg.solve(middle, diff)
    except np.linalg.LinAlgError as e:
        raise TestError(f"singular Wald middle matrix: {e}") from None
    w = float(diff @ sol)
    if w < 0.0:
        if w < -1e-8:
            raise TestError(f"negative Wald statistic {w}: covariance not PSD")
        w = 0.0
    d = hyp.df
    return TestResult(statistic=w, df=d, p_value=chi2_sf(w, d), kind="Wald", name=hyp.name)


def lr_test(fit_full: FitResult, fit_null: FitResult, df: int,
            boundary: bool = False, mixture_weights=(0.5, 0.5)) -> TestResult:
    """Likelihood ratio test of a null fit nested in a full fit.

    Args:
        fit_full, fit_null: converged fits of nested models.
        df: number of restrictions.
        boundary: the null pins a variance component at the boundary; the
            reference becomes the mixture of chi2(0) and chi2(df) with the
            given weights (default the equal mixture).
        mixture_weights: (weight on chi2_0, weight on chi2_df).

    Returns:
        TestResult; a nesting violation (t below -1e-6 before flooring)
        is flagged and warned about rather than silently floored.
    """
    if not (fit_full.converged and fit_null.converged):
        raise TestRefusedError("both fits must have converged for the LRT")
    t = 2.0 * (fit_full.loglik - fit_null.loglik)
    flags = {}
    if t < -1e-6:
        flags["nesting_violation"] = t
        warnings.warn(
            f"LRT statistic {t:.3e} is negative beyond tolerance; "
            "the null fit likely failed to maximize", RuntimeWarning,
        )
    t = max(t, 0.0)
    if boundary:
        w0, w1 = mixture_weights
        p = w0 * (1.0 if t <= 0.0 else 0.0) + w1 * chi2_sf(t, df)
        return TestResult(statistic=t, df=("mixture", (0, df), tuple(mixture_weights)),
                          p_value=float(p), kind="LRT-boundary", flags=flags)
    p = 1.0 if t == 0.0 else chi2_sf(t, df)
    return TestResult(statistic=t, df=df, p_value=float(p), kind="LRT", flags=flags)


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values.

    NaN entries are propagated (and excluded from the multiplicity count m,
    matching the usual complete-case convention); finite entries must lie
    in [0, 1].  Adjusted values are p_(i) * m / i cumulative-minimized from
    the largest rank downward, capped at 1.
    """
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        raise ValueError("p-values must be one-dimensional")
    nan_mask = np.isnan(p)
    if np.any((p < 0) & ~nan_mask) or np.any((p > 1) & ~nan_mask):
        raise ValueError("p-values must lie in [0, 1]")
    out = np.full(p.shape, np.nan)
    valid = np.flatnonzero(~nan_mask)
    m = valid.size
    if np.any(nan_mask):
        warnings.warn(f"{int(nan_mask.sum())} NaN p-values passed through unadjusted",
                      RuntimeWarning)
    if m == 0:
        return out
    pv = p[valid]
    order = np.argsort(pv, kind="stable")
    ranked = pv[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(ranked[::-1])[::-1]
    adj = np.minimum(adj, 1.0)
    restored = np.empty(m)
    restored[order] = adj
    out[valid] = restored
    return out
