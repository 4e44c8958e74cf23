"""Poisson-Tweedie mixed-model specification and maximum likelihood fitting.

The model for counts y_ij of subject i at occasion j is

    y_ij | v_i ~ PT(mu_ij, D, a),   log mu_ij = x_ij' beta + v_i + o_ij,
    v_i ~ N(0, sigma^2),

with a shared random intercept per subject.  The marginal log likelihood
integrates the random intercept out of each subject's contribution with an
adaptive Gauss-Hermite rule recentered at the per-subject posterior mode.

Fitting maximizes the marginal likelihood over the unconstrained
parameterization (beta, log(D-1), log(1-a), log sigma^2) with Nelder-Mead,
retrying with BFGS (numeric central-difference gradient) when Nelder-Mead
does not converge.  Simpler family members (negative binomial, Poisson,
and the no-random-effect GLMs) share the same machinery with parameters
fixed at the corresponding corner.  Warm starts come from a negative
binomial mixed fit (or a Poisson mixed fit when that fails), a Pearson
moment estimate of the dispersion, and profile scoring of the power.

The covariance of the estimates is the inverse observed information
(numeric Hessian of the marginal log likelihood at the optimum, on the
natural parameter scale).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from . import _kernel
from .ptdist import EPS_D, PmfEvaluationError, pt_mom_estimates
from .quadrature import AdaptiveState, QuadratureRule, gh_rule

__all__ = [
    "DataError",
    "FitError",
    "LongitudinalDataset",
    "ThetaFull",
    "FitOptions",
    "FitResult",
    "StartingValues",
    "marginal_loglik",
    "starting_values",
    "fit_ptmixed",
    "fit_nbmixed",
    "fit_ptglm",
    "fit_nbglm",
    "fit_gene_cascade",
    "observed_information",
    "numeric_hessian",
    "ranef_blup",
    "poisson_glm_irls",
]

SQRT2 = math.sqrt(2.0)
# Cap on the linear predictor: keeps every kernel intermediate finite
# (single recursion steps grow by at most a factor exp(LOG_MU_CAP)) while
# sitting far above any plausible count mean.
LOG_MU_CAP = 50.0


class DataError(ValueError):
    """Invalid dataset (shapes, ranks, subject coding, degeneracy)."""


class FitError(RuntimeError):
    """A fit-level operation could not be carried out."""


# --------------------------------------------------------------------------
# data and parameter containers
# --------------------------------------------------------------------------


@dataclass
class LongitudinalDataset:
    """Long-format counts with design matrix, subject ids and offsets.

    Attributes:
        y: nonnegative integer counts, one per observation.
        X: fixed-effects design matrix, first column all ones.
        subject: integer subject index per observation, contiguous 0..n-1.
        offset: log normalization weight per observation (default zeros).
        coef_names: one name per X column.
        time, group: optional per-observation tags used by the simulation
            harness and reporting; not part of the likelihood.
    """

    y: np.ndarray
    X: np.ndarray
    subject: np.ndarray
    offset: np.ndarray | None = None
    coef_names: list[str] | None = None
    time: np.ndarray | None = None
    group: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y)
        if self.y.ndim != 1:
            raise DataError("y must be one-dimensional")
        if np.any(self.y < 0) or np.any(self.y != np.floor(self.y)):
            raise DataError("counts must be nonnegative integers")
        self.y = self.y.astype(np.int64)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise DataError("X must be (n_obs, p)")
        if not np.allclose(self.X[:, 0], 1.0):
            raise DataError("first design column must be the intercept")
        if np.linalg.matrix_rank(self.X) < self.X.shape[1]:
            raise DataError("design matrix is rank deficient")
        self.subject = np.asarray(self.subject)
        if self.subject.shape != self.y.shape:
            raise DataError("subject must align with y")
        self.subject = self.subject.astype(np.int64)
        uniq = np.unique(self.subject)
        if uniq[0] != 0 or not np.array_equal(uniq, np.arange(uniq.size)):
            raise DataError("subject indices must be contiguous 0..n-1")
        if self.offset is None:
            self.offset = np.zeros_like(self.y, dtype=float)
        else:
            self.offset = np.asarray(self.offset, dtype=float)
            if self.offset.shape != self.y.shape:
                raise DataError("offset must align with y")
            if not np.all(np.isfinite(self.offset)):
                raise DataError("offsets must be finite")
        if self.coef_names is None:
            self.coef_names = ["(intercept)"] + [f"x{i}" for i in range(1, self.X.shape[1])]
        if len(self.coef_names) != self.X.shape[1]:
            raise DataError("coef_names must match the design columns")

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_subjects(self) -> int:
        return int(self.subject.max()) + 1

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    def without_columns(self, names) -> "LongitudinalDataset":
        """Copy with the named design columns removed (for nested fits)."""
        drop = set([names] if isinstance(names, str) else names)
        missing = drop - set(self.coef_names)
        if missing:
            raise DataError(f"unknown design columns: {sorted(missing)}")
        keep = [i for i, n in enumerate(self.coef_names) if n not in drop]
        if 0 not in keep:
            raise DataError("cannot drop the intercept")
        return LongitudinalDataset(
            y=self.y,
            X=self.X[:, keep],
            subject=self.subject,
            offset=self.offset,
            coef_names=[self.coef_names[i] for i in keep],
            time=self.time,
            group=self.group,
        )


@dataclass(frozen=True)
class ThetaFull:
    """Full parameter vector (beta, dispersion D, power a, ranef variance)."""

    beta: np.ndarray
    dispersion: float = 1.0
    power: float = 0.0
    ranef_var: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    def validate(self):
        if not np.all(np.isfinite(self.beta)):
            raise FitError("beta must be finite")
        if not (np.isfinite(self.dispersion) and self.dispersion >= 1.0):
            raise FitError(f"dispersion must be >= 1, got {self.dispersion}")
        if not (np.isfinite(self.power) and self.power <= 1.0):
            raise FitError(f"power must be <= 1, got {self.power}")
        if not (np.isfinite(self.ranef_var) and self.ranef_var >= 0.0):
            raise FitError(f"ranef variance must be >= 0, got {self.ranef_var}")


# --------------------------------------------------------------------------
# family bookkeeping: which of (D, a, sigma^2) a model carries
# --------------------------------------------------------------------------

_FAMILIES = {
    # key: (pmf family, mixed, has dispersion, has power, model tag)
    "pt-glmm": ("pt", True, True, True, "PT-GLMM"),
    "nb-glmm": ("nb", True, True, False, "NB-GLMM"),
    "pois-glmm": ("pois", True, False, False, "Poisson-GLMM"),
    "pt-glm": ("pt", False, True, True, "PT-GLM"),
    "nb-glm": ("nb", False, True, False, "NB-GLM"),
}


def _family_info(key):
    try:
        return _FAMILIES[key]
    except KeyError:
        raise ValueError(f"unknown model family {key!r}") from None


def _pack(theta: ThetaFull, key: str) -> np.ndarray:
    _, mixed, has_d, has_a, _ = _family_info(key)
    parts = [theta.beta]
    if has_d:
        parts.append([math.log(max(theta.dispersion - 1.0, 1e-300))])
    if has_a:
        parts.append([math.log(max(1.0 - theta.power, 1e-300))])
    if mixed:
        parts.append([math.log(max(theta.ranef_var, 1e-300))])
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def _unpack(x: np.ndarray, p: int, key: str) -> ThetaFull:
    _, mixed, has_d, has_a, _ = _family_info(key)
    beta = x[:p]
    i = p
    disp, power, s2 = 1.0, 1.0, 0.0
    if has_d:
        disp = 1.0 + math.exp(min(x[i], 345.0))
        i += 1
    if has_a:
        power = 1.0 - math.exp(min(x[i], 345.0))
        i += 1
    else:
        power = 0.0 if has_d else 1.0
    if mixed:
        s2 = math.exp(min(x[i], 345.0))
        i += 1
    return ThetaFull(beta=beta, dispersion=disp, power=power, ranef_var=s2)


def _wall_bounds(p: int, key: str):
    """Soft box per packed coordinate; quadratic penalty outside."""
    _, mixed, has_d, has_a, _ = _family_info(key)
    lo, hi = [-40.0] * p, [40.0] * p
    if has_d:
        lo.append(-35.0)
        hi.append(25.0)
    if has_a:
        lo.append(-35.0)
        hi.append(math.log(51.0))  # power >= -50
    if mixed:
        lo.append(-30.0)
        hi.append(10.0)
    return np.array(lo), np.array(hi)


def _natural_vector(theta: ThetaFull, key: str) -> np.ndarray:
    _, mixed, has_d, has_a, _ = _family_info(key)
    parts = [theta.beta]
    if has_d:
        parts.append([theta.dispersion])
    if has_a:
        parts.append([theta.power])
    if mixed:
        parts.append([theta.ranef_var])
    return np.concatenate([np.asarray(v, dtype=float) for v in parts])


def _natural_names(coef_names, key: str) -> list[str]:
    _, mixed, has_d, has_a, _ = _family_info(key)
    names = list(coef_names)
    if has_d:
        names.append("dispersion")
    if has_a:
        names.append("power")
    if mixed:
        names.append("ranef_var")
    return names


def _theta_from_natural(v: np.ndarray, p: int, key: str) -> ThetaFull:
    _, mixed, has_d, has_a, _ = _family_info(key)
    beta = v[:p]
    i = p
    disp, power, s2 = 1.0, 0.0, 0.0
    if has_d:
        disp = v[i]
        i += 1
    if has_a:
        power = v[i]
        i += 1
    elif not has_d:
        power = 1.0
    if mixed:
        s2 = v[i]
    return ThetaFull(beta=beta, dispersion=disp, power=power, ranef_var=s2)


# --------------------------------------------------------------------------
# likelihood engine
# --------------------------------------------------------------------------


def _pt_consts(dispersion: float, power: float, kmax: int):
    """(c, kappa, rho) for the row kernel, robust for extreme dispersion."""
    log_c = math.log(dispersion - 1.0) - math.log(dispersion - power)
    log_1mc = math.log(1.0 - power) - math.log(dispersion - power)
    c = math.exp(log_c)
    if power == 0.0:
        kappa = -log_1mc * math.exp(log_1mc) / c
    else:
        kappa = -math.expm1(power * log_1mc) * math.exp((1.0 - power) * log_1mc) / (power * c)
    j = np.arange(max(kmax, 1), dtype=float)
    with np.errstate(under="ignore"):
        rho = np.exp(
            (1.0 - power) * log_1mc
            + j * log_c
            + gammaln(j + 1.0 - power)
            - gammaln(1.0 - power)
            - gammaln(j + 1.0)
        )
    return c, kappa, rho


class _Engine:
    """Evaluates the marginal log likelihood of one dataset and family.

    Observations are kept sorted by subject so per-subject reductions are
    contiguous.  For mixed models the engine maintains standardized
    adaptive states (z = v/sigma, scale in z units), refreshed by a
    vectorized safeguarded Newton search every `freeze` evaluations.
    Working in z units keeps the numeric-difference mode search well
    conditioned for any sigma, including sigma^2 -> 0.
    """

    ADAPT_STEP = 1e-4
    # central differences with ADAPT_STEP resolve the mode to ~1e-7; a
    # tighter tolerance only makes the Newton iteration chatter
    ADAPT_TOL = 1e-7
    Z_CAP = 60.0
    SZ_RANGE = (1e-4, 10.0)

    def __init__(self, data: LongitudinalDataset, family: str, mixed: bool,
                 k_quad: int = 5, freeze: int = 1):
        order = np.argsort(data.subject, kind="stable")
        self.y = data.y[order]
        self.X = np.ascontiguousarray(data.X[order])
        self.off = data.offset[order]
        subj = data.subject[order]
        self.subj = subj
        self.n_subj = int(subj[-1]) + 1
        self.seg = np.searchsorted(subj, np.arange(self.n_subj))
        self.N = self.y.shape[0]
        self.p = self.X.shape[1]
        self.lgy1 = gammaln(self.y + 1.0)
        self.kmax = int(self.y.max())
        self.family = family
        self.mixed = mixed
        self.freeze = max(1, int(freeze))
        self.n_evals = 0
        self.n_adapt_sweeps = 0
        if mixed:
            rule = gh_rule(k_quad)
            self.k = rule.npoints
            self.u = rule.nodes
            self.logw_u2 = np.log(rule.weights) + rule.nodes ** 2
            self.y_k = np.tile(self.y, self.k)
            self.lgy1_k = np.tile(self.lgy1, self.k)
            self.seg_k = (np.arange(self.k)[:, None] * self.N + self.seg[None, :]).ravel()
            self.y_3 = np.tile(self.y, 3)
            self.lgy1_3 = np.tile(self.lgy1, 3)
            self.seg_3 = (np.arange(3)[:, None] * self.N + self.seg[None, :]).ravel()
            self.z = np.zeros(self.n_subj)
            self.sz = np.ones(self.n_subj)
            self._since_refresh = np.inf

    # -- pmf rows ----------------------------------------------------------

    def _rows(self, y, logmu, lgy1, theta, consts):
        logmu = np.minimum(logmu, LOG_MU_CAP)
        if self.family == "pois" or theta.dispersion <= 1.0:
            return _kernel.pois_logpmf_rows(y, logmu, lgy1)
        if self.family == "nb" or theta.power == 0.0:
            return _kernel.nb_logpmf_rows(y, logmu, theta.dispersion, lgy1)
        c, kappa, rho = consts
        return _kernel.pt_logpmf_rows(y, logmu, c, kappa, rho)

    def _consts(self, theta):
        if self.family == "pt" and theta.power != 0.0 and theta.dispersion > 1.0:
            return _pt_consts(theta.dispersion, theta.power, self.kmax)
        return None

    # -- likelihood --------------------------------------------------------

    def loglik(self, theta: ThetaFull) -> float:
        self.n_evals += 1
        eta = self.X @ theta.beta + self.off
        consts = self._consts(theta)
        if not self.mixed or theta.ranef_var <= 0.0:
            lp = self._rows(self.y, eta, self.lgy1, theta, consts)
            return float(lp.sum())
        s2 = theta.ranef_var
        sigma = math.sqrt(s2)
        if self._since_refresh >= self.freeze:
            self._adapt(theta, consts, eta, sigma)
            self._since_refresh = 1
        else:
            self._since_refresh += 1
        # quadrature nodes per subject, in v units
        v_nodes = sigma * (self.z[None, :] + SQRT2 * self.sz[None, :] * self.u[:, None])
        logmu = (eta[None, :] + v_nodes[:, self.subj]).ravel()
        lp = self._rows(self.y_k, logmu, self.lgy1_k, theta, consts)
        if not np.all(np.isfinite(lp)):
            lp = np.where(np.isfinite(lp), lp, -np.inf)
        seg_sum = np.add.reduceat(lp, self.seg_k).reshape(self.k, self.n_subj)
        prior = -0.5 * v_nodes ** 2 / s2 - 0.5 * math.log(2.0 * math.pi * s2)
        terms = seg_sum + prior + self.logw_u2[:, None]
        m = terms.max(axis=0)
        if not np.all(np.isfinite(m)):
            return -np.inf
        with np.errstate(under="ignore"):
            li = m + np.log(np.exp(terms - m).sum(axis=0))
        li += np.log(sigma * self.sz * SQRT2)
        total = float(li.sum())
        return total if np.isfinite(total) else -np.inf

    # -- adaptive recentering ------------------------------------------------

    def _g3(self, z, theta, consts, eta, sigma, delta):
        """Per-subject log h(sigma*(z +/- delta)) for the three shifts."""
        zz = np.concatenate([z, z + delta, z - delta])
        v = sigma * zz
        logmu = np.concatenate([eta, eta, eta]) + v[
            np.concatenate([self.subj, self.subj + self.n_subj, self.subj + 2 * self.n_subj])
        ]
        lp = self._rows(self.y_3, logmu, self.lgy1_3, theta, consts)
        seg = np.add.reduceat(lp, self.seg_3).reshape(3, self.n_subj)
        return seg - 0.5 * zz.reshape(3, self.n_subj) ** 2

    def _g1(self, z, theta, consts, eta, sigma):
        logmu = eta + sigma * z[self.subj]
        lp = self._rows(self.y, logmu, self.lgy1, theta, consts)
        return np.add.reduceat(lp, self.seg) - 0.5 * z ** 2

    def _adapt(self, theta, consts, eta, sigma):
        """Vectorized safeguarded Newton search for the per-subject modes.

        Steps are accepted optimistically (one batched 3-point evaluation
        per sweep); a step that turns out not to improve log h is reverted
        and halved at the next sweep.
        """
        z = self.z.copy()
        delta = self.ADAPT_STEP
        n = self.n_subj
        g_prev = np.full(n, -np.inf)
        z_prev = z.copy()
        step = np.zeros(n)
        halvings = np.zeros(n, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        d2 = np.full(n, -1.0)
        for sweep in range(60):
            self.n_adapt_sweeps += 1
            g = self._g3(z, theta, consts, eta, sigma, delta)
            bad = ~np.isfinite(g[0])
            if sweep == 0 and np.any(bad):
                z[bad] = 0.0
                z_prev[bad] = 0.0
                g = self._g3(z, theta, consts, eta, sigma, delta)
                bad = ~np.isfinite(g[0])
                if np.any(bad):
                    done[bad] = True  # hopeless rows; leave their state
            worse = ~done & (g[0] < g_prev - 1e-12)
            if np.any(worse):
                # revert the optimistic step and retry with half of it
                halvings[worse] += 1
                z[worse] = z_prev[worse]
                step[worse] *= 0.5
                stuck = worse & (halvings > 25)
                done |= stuck
                ok = ~worse
            else:
                ok = ~done
            d1 = (g[1] - g[2]) / (2.0 * delta)
            d2 = np.where(ok & np.isfinite(g[0]), (g[1] - 2.0 * g[0] + g[2]) / (delta * delta), d2)
            concave = d2 < -1e-12
            newton = np.where(concave, -d1 / np.where(concave, d2, -1.0), np.sign(d1) * 0.5)
            newton = np.clip(newton, -10.0, 10.0)
            step = np.where(ok & ~done, newton, step)
            g_prev = np.where(ok, g[0], g_prev)
            z_prev = np.where(ok, z, z_prev)
            halvings[ok] = 0
            done |= ok & (np.abs(step) < self.ADAPT_TOL)
            if np.all(done):
                break
            z = np.clip(np.where(done, z, z + step), -self.Z_CAP, self.Z_CAP)
        if self.k <= 2:
            # With few nodes the integral value is directly sensitive to
            # s_hat, and the tight-step second difference carries
            # cancellation noise ~ |g| eps / delta^2 that leaves the
            # objective too rough for the optimizer; a wider step trades
            # that noise for a smooth O(delta^2) bias.
            wide = 5e-3
            g = self._g3(z, theta, consts, eta, sigma, wide)
            d2 = (g[1] - 2.0 * g[0] + g[2]) / (wide * wide)
        concave = np.isfinite(d2) & (d2 < -1e-12)
        sz = np.where(concave, np.sqrt(-1.0 / np.where(concave, d2, -1.0)), 1.0)
        self.z = z
        self.sz = np.clip(sz, self.SZ_RANGE[0], self.SZ_RANGE[1])

    def states_in_v(self, sigma: float):
        """Current states as (v_hat, s_hat) in the untransformed variable."""
        return sigma * self.z, sigma * self.sz

    def set_states_from_v(self, v_hat, s_hat, sigma: float):
        self.z = np.asarray(v_hat, dtype=float) / sigma
        self.sz = np.clip(np.asarray(s_hat, dtype=float) / sigma, *self.SZ_RANGE)
        self._since_refresh = -np.inf  # never refresh


# --------------------------------------------------------------------------
# public likelihood evaluation
# --------------------------------------------------------------------------


def marginal_loglik(theta: ThetaFull, data: LongitudinalDataset,
                    rule: QuadratureRule | int | None = None,
                    states=None, family: str = "pt-glmm") -> float:
    """Marginal log likelihood of a (mixed) model at theta.

    Args:
        theta: parameter vector; ranef_var = 0 gives the no-random-effect
            log likelihood.
        data: dataset.
        rule: QuadratureRule, node count, or None for the 5-point default.
        states: optional per-subject AdaptiveState sequence; when omitted
            the states are adapted at theta.
        family: model family key ('pt-glmm', 'nb-glmm', ...).

    Returns:
        Sum over subjects of the log AGHQ-approximated integrals.
    """
    theta.validate()
    fam, mixed, _, _, _ = _family_info(family)
    if isinstance(rule, QuadratureRule):
        k = rule.npoints
    elif rule is None:
        k = 5
    else:
        k = int(rule)
    eng = _Engine(data, fam, mixed and theta.ranef_var > 0.0, k_quad=k)
    if states is not None and eng.mixed:
        sigma = math.sqrt(theta.ranef_var)
        eng.set_states_from_v(
            np.array([s.v_hat for s in states]),
            np.array([s.s_hat for s in states]),
            sigma,
        )
    ll = eng.loglik(theta)
    if not np.isfinite(ll):
        # locate an offending observation for the error report
        eta = np.minimum(data.X @ theta.beta + data.offset, LOG_MU_CAP)
        lp = eng._rows(data.y, eta, gammaln(data.y + 1.0), theta, eng._consts(theta))
        bad = np.flatnonzero(~np.isfinite(lp))
        where = (
            f"subject {data.subject[bad[0]]}, observation {bad[0]}"
            if bad.size else "the integral accumulation"
        )
        raise PmfEvaluationError(
            int(bad[0]) if bad.size else -1,
            f"marginal log likelihood is not finite at theta ({where})",
        )
    return ll


# --------------------------------------------------------------------------
# options / results
# --------------------------------------------------------------------------


@dataclass
class FitOptions:
    """Tuning knobs of the fitting pipeline (all have sane defaults)."""

    k_quad: int = 5
    max_iter: int = 2000        # Nelder-Mead iteration cap
    tol: float = 1e-8           # Nelder-Mead function-spread tolerance
    xatol: float = 1e-4         # Nelder-Mead simplex x-spread tolerance
    freeze: int = 1             # refresh adaptive states every this many evaluations
    starts: ThetaFull | None = None
    collapse_eps: float = 1e-3  # drop the random intercept below this starting variance
    warm_budget: int = 500      # loglik evaluations per warm-start stage
    bfgs_max_iter: int = 80
    compute_vcov: bool = True
    boundary_tol: float = 1e-4
    trace: bool = False


@dataclass
class FitResult:
    """Maximum likelihood fit of one model on one dataset."""

    theta_hat: ThetaFull
    loglik: float
    vcov: np.ndarray | None
    converged: bool
    model_tag: str
    n_loglik_evals: int
    coef_names: list[str]
    param_names: list[str]
    family: str
    flags: dict
    theta_start: ThetaFull
    n_obs: int
    n_subjects: int
    optimizer_trace: list | None = None

    @property
    def mixed(self) -> bool:
        return _family_info(self.family)[1]

    @property
    def n_coef(self) -> int:
        return len(self.coef_names)

    def beta_cov(self) -> np.ndarray:
        """Fixed-effect block of the inverse observed information."""
        if self.vcov is None:
            raise FitError("no covariance available for this fit: "
                           + self.flags.get("vcov_reason", "unknown reason"))
        p = self.n_coef
        return self.vcov[:p, :p]


@dataclass
class StartingValues:
    """Warm-start vector plus provenance flags."""

    theta: ThetaFull
    source: str
    flags: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# warm starts
# --------------------------------------------------------------------------


def poisson_glm_irls(y, X, offset, max_iter: int = 60, tol: float = 1e-10):
    """Poisson GLM coefficients by iteratively reweighted least squares."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    beta = np.zeros(p)
    base = float(np.mean(y * np.exp(-np.clip(offset, -50, 50))))
    beta[0] = math.log(max(base, 1e-8))
    for _ in range(max_iter):
        eta = np.clip(X @ beta + offset, -LOG_MU_CAP, LOG_MU_CAP)
        mu = np.exp(eta)
        z = eta - offset + (y - mu) / mu
        WX = X * mu[:, None]
        try:
            new = np.linalg.solve(X.T @ WX, WX.T @ z)
        except np.linalg.LinAlgError:
            new, *_ = np.linalg.lstsq(np.sqrt(mu)[:, None] * X,
                                      np.sqrt(mu) * z, rcond=None)
        delta = np.max(np.abs(new - beta))
        beta = new
        if delta < tol:
            break
    mu = np.exp(np.clip(X @ beta + offset, -LOG_MU_CAP, LOG_MU_CAP))
    return beta, mu


def _pearson_dispersion(y, mu, p) -> float:
    resid = (y - mu) ** 2 / np.maximum(mu, 1e-300)
    dof = max(len(y) - p, 1)
    return float(np.clip(resid.sum() / dof, 1.0 + EPS_D, 1e4))


def _subject_variance_start(y, mu, subject, n_subj) -> float:
    ys = np.bincount(subject, weights=y, minlength=n_subj)
    ms = np.bincount(subject, weights=mu, minlength=n_subj)
    s = np.log((ys + 0.5) / (ms + 0.5))
    if n_subj < 2:
        return 0.1
    return float(np.clip(np.var(s, ddof=1), 1e-6, 10.0))


def starting_values(data: LongitudinalDataset, family: str = "pt-glmm",
                    options: FitOptions | None = None) -> StartingValues:
    """Warm-start parameters for the requested family.

    For the PT mixed model: beta and sigma^2 from a budgeted negative
    binomial mixed fit (falling back to a Poisson mixed fit and then to a
    flat heuristic), dispersion from that fit or a Pearson moment
    estimate, and power from profile scoring of the marginal sample.

    Raises:
        DataError: for an all-zero response.
    """
    options = options or FitOptions()
    if np.all(data.y == 0):
        raise DataError("degenerate response: all counts are zero")
    fam, mixed, has_d, has_a, _ = _family_info(family)
    flags = {}
    beta, mu = poisson_glm_irls(data.y, data.X, data.offset)
    d_mom = _pearson_dispersion(data.y, mu, data.n_coef)
    s2 = _subject_variance_start(data.y, mu, data.subject, data.n_subjects)
    source = "poisson-irls"

    if fam == "pt" or (fam == "nb" and mixed):
        power0 = 0.0
        if has_a:
            mom = pt_mom_estimates(data.y)
            power0 = mom.power if not mom.degenerate else 0.0
            flags["power_profile"] = power0
        if fam == "pt" and mixed:
            warm_opts = replace(options, starts=None, compute_vcov=False, trace=False)
            warm = _fit_family(data, "nb-glmm",
                               ThetaFull(beta, d_mom, 0.0, s2),
                               warm_opts, budget=options.warm_budget,
                               loose=True)
            if np.isfinite(warm.loglik):
                beta = warm.theta_hat.beta
                d_mom = float(np.clip(warm.theta_hat.dispersion, 1.0 + EPS_D, 1e4))
                s2 = warm.theta_hat.ranef_var
                source = "nb-glmm"
                flags["warm_converged"] = warm.converged
            else:
                warm = _fit_family(data, "pois-glmm", ThetaFull(beta, 1.0, 1.0, s2),
                                   warm_opts, budget=options.warm_budget,
                                   loose=True)
                if np.isfinite(warm.loglik):
                    beta = warm.theta_hat.beta
                    s2 = warm.theta_hat.ranef_var
                    source = "pois-glmm"
                    flags["warm_converged"] = warm.converged
                else:
                    source = "fallback"
                    s2 = 0.1
                    flags["fallback"] = True
        theta = ThetaFull(beta, d_mom if has_d else 1.0,
                          power0 if has_a else 0.0, s2 if mixed else 0.0)
    else:
        theta = ThetaFull(beta, d_mom if has_d else 1.0,
                          0.0 if has_d else 1.0, s2 if mixed else 0.0)
    return StartingValues(theta=theta, source=source, flags=flags)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------


class _Objective:
    """Negative penalized marginal log likelihood with best-point tracking."""

    def __init__(self, engine: _Engine, p: int, key: str, trace: bool):
        self.engine = engine
        self.p = p
        self.key = key
        self.lo, self.hi = _wall_bounds(p, key)
        self.best_f = np.inf
        self.best_ll = -np.inf
        self.best_x = None
        self.n_calls = 0
        self.trace = [] if trace else None

    def _penalty(self, x):
        under = np.maximum(self.lo - x, 0.0)
        over = np.maximum(x - self.hi, 0.0)
        return 1e4 * float(under @ under + over @ over)

    def __call__(self, x):
        self.n_calls += 1
        if not np.all(np.isfinite(x)):
            return 1e15
        pen = self._penalty(x)
        theta = _unpack(x, self.p, self.key)
        try:
            ll = self.engine.loglik(theta)
        except (PmfEvaluationError, FloatingPointError):
            ll = -np.inf
        if not np.isfinite(ll):
            f = 1e14 + pen
        else:
            f = -ll + pen
            if f < self.best_f:
                self.best_f = f
                self.best_ll = ll
                self.best_x = x.copy()
        if self.trace is not None:
            self.trace.append((self.n_calls, float(ll) if np.isfinite(ll) else None))
        return f


def _central_gradient(f, x):
    """Central-difference gradient with step max(1e-4, 1e-4 |x_j|)."""
    g = np.empty_like(x)
    for j in range(x.size):
        h = max(1e-4, 1e-4 * abs(x[j]))
        xp = x.copy(); xp[j] += h
        xm = x.copy(); xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _run_optimizers(obj: _Objective, x0: np.ndarray, options: FitOptions,
                    budget: int | None = None, loose: bool = False,
                    f_scale: float = 1.0):
    """Nelder-Mead, then BFGS from its best point on failure.

    The function tolerance is applied relative to the objective magnitude
    (the convention of the reference optimizer this pipeline mirrors); the
    caller passes |f(x0)| as the scale.
    """
    fatol = (1e-6 if loose else options.tol) * max(1.0, f_scale)
    xatol = 1e-3 if loose else options.xatol
    maxfev = budget if budget is not None else 3 * options.max_iter
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = optimize.minimize(
            obj, x0, method="Nelder-Mead",
            options=dict(maxiter=options.max_iter, maxfev=maxfev,
                         fatol=fatol, xatol=xatol, adaptive=True),
        )
    nm_success = bool(res.success) and np.isfinite(res.fun)
    bfgs_used = bfgs_success = False
    if not nm_success and budget is None:
        start = obj.best_x if obj.best_x is not None else x0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res2 = optimize.minimize(
                obj, start, method="BFGS",
                jac=lambda x: _central_gradient(obj, x),
                options=dict(maxiter=options.bfgs_max_iter, gtol=3e-4),
            )
        bfgs_used = True
        bfgs_success = bool(res2.success) and np.isfinite(res2.fun)
        if not bfgs_success and np.isfinite(res2.fun):
            # accept a precision-loss stop whose gradient is already flat
            gmax = float(np.max(np.abs(res2.jac))) if res2.jac is not None else np.inf
            bfgs_success = gmax < 2e-3
    return nm_success, bfgs_used, bfgs_success


def numeric_hessian(f, x: np.ndarray) -> np.ndarray:
    """Central-difference Hessian with step max(1e-4, 1e-4 |x_j|)."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = np.maximum(1e-4, 1e-4 * np.abs(x))
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        xp = x.copy(); xp[i] += h[i]
        xm = x.copy(); xm[i] -= h[i]
        H[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / (h[i] * h[i])
    for i in range(d):
        for j in range(i + 1, d):
            xpp = x.copy(); xpp[i] += h[i]; xpp[j] += h[j]
            xpm = x.copy(); xpm[i] += h[i]; xpm[j] -= h[j]
            xmp = x.copy(); xmp[i] -= h[i]; xmp[j] += h[j]
            xmm = x.copy(); xmm[i] -= h[i]; xmm[j] -= h[j]
            H[i, j] = H[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * h[i] * h[j])
    return H


def observed_information(theta: ThetaFull, data: LongitudinalDataset,
                         family: str = "pt-glmm", k_quad: int = 5,
                         refresh_states: bool = False) -> np.ndarray:
    """Observed Fisher information at theta on the natural scale.

    Negative central-difference Hessian of the marginal log likelihood in
    the coordinates (beta, D, a, sigma^2) carried by the family,
    symmetrized; repaired by a minimal ridge (with a warning) if not
    positive semidefinite.

    By default the adaptive states are located once at theta and held
    fixed across the difference stencil, so the differenced function is
    smooth to machine precision (re-located states inject mode-search
    noise of ~1e-8 into the likelihood, which second differences at step
    1e-4 amplify ruinously).  Set refresh_states=True to re-adapt at
    every stencil point.
    """
    fam, mixed, _, _, _ = _family_info(family)
    eng = _Engine(data, fam, mixed, k_quad=k_quad)
    p = data.n_coef
    if mixed and not refresh_states:
        eng.loglik(theta)  # adapt once at the expansion point
        eng._since_refresh = -np.inf

    def nat_ll(v):
        return eng.loglik(_theta_from_natural(v, p, family))

    H = numeric_hessian(nat_ll, _natural_vector(theta, family))
    info = -0.5 * (H + H.T)
    eigmin = float(np.linalg.eigvalsh(info)[0])
    if eigmin < 0.0:
        warnings.warn(
            f"observed information repaired by ridge {abs(eigmin) + 1e-8:.3e}",
            RuntimeWarning,
        )
        info = info + (abs(eigmin) + 1e-8) * np.eye(info.shape[0])
    return info


def _vcov_for_fit(data, theta, key, options):
    """(vcov, flags) at theta; None when boundary-adjacent or singular."""
    flags = {}
    _, mixed, has_d, has_a, _ = _family_info(key)
    tol = options.boundary_tol
    at_boundary = []
    if has_d and theta.dispersion - 1.0 < tol:
        at_boundary.append("dispersion")
    if has_a and 1.0 - theta.power < tol:
        at_boundary.append("power")
    if mixed and theta.ranef_var < tol:
        at_boundary.append("ranef_var")
    if at_boundary:
        flags["boundary"] = at_boundary
        flags["vcov_reason"] = f"estimate at the domain boundary: {at_boundary}"
        return None, flags
    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always")
        info = observed_information(theta, data, family=key, k_quad=options.k_quad)
        if any("ridge" in str(w.message) for w in wlist):
            flags["vcov_ridged"] = True
    try:
        vcov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        flags["vcov_reason"] = "observed information is singular"
        return None, flags
    vcov = 0.5 * (vcov + vcov.T)
    return vcov, flags


def _fit_family(data: LongitudinalDataset, key: str, theta0: ThetaFull,
                options: FitOptions, budget: int | None = None,
                loose: bool = False, extra_flags: dict | None = None) -> FitResult:
    fam, mixed, _, _, tag = _family_info(key)
    engine = _Engine(data, fam, mixed, k_quad=options.k_quad, freeze=options.freeze)
    p = data.n_coef
    obj = _Objective(engine, p, key, options.trace)
    x0 = _pack(theta0, key)
    f0 = obj(x0)
    f_scale = abs(f0) if np.isfinite(f0) and f0 < 1e13 else 1.0
    nm_success, bfgs_used, bfgs_success = _run_optimizers(obj, x0, options, budget,
                                                          loose, f_scale)
    converged = nm_success or bfgs_success
    if obj.best_x is None:
        best_x, best_ll, converged = x0, obj.best_ll, False
    else:
        best_x, best_ll = obj.best_x, obj.best_ll
    theta_hat = _unpack(best_x, p, key)
    flags = dict(extra_flags or {})
    flags.update(nm_success=nm_success, bfgs_used=bfgs_used, bfgs_success=bfgs_success,
                 start_loglik=float(-f0) if np.isfinite(f0) and f0 < 1e13 else None)
    vcov = None
    if options.compute_vcov and converged and np.isfinite(best_ll) and budget is None:
        vcov, vflags = _vcov_for_fit(data, theta_hat, key, options)
        flags.update(vflags)
    elif not converged:
        flags["vcov_reason"] = "fit did not converge"
    return FitResult(
        theta_hat=theta_hat,
        loglik=float(best_ll),
        vcov=vcov,
        converged=bool(converged and np.isfinite(best_ll)),
        model_tag=tag,
        n_loglik_evals=obj.n_calls,
        coef_names=list(data.coef_names),
        param_names=_natural_names(data.coef_names, key),
        family=key,
        flags=flags,
        theta_start=theta0,
        n_obs=data.n_obs,
        n_subjects=data.n_subjects,
        optimizer_trace=obj.trace,
    )


# --------------------------------------------------------------------------
# public fitting entry points
# --------------------------------------------------------------------------


def _resolve_starts(data, family, options) -> tuple[ThetaFull, dict]:
    if options.starts is not None:
        theta0 = options.starts
        theta0.validate()
        return theta0, {"start_source": "user"}
    sv = starting_values(data, family, options)
    return sv.theta, {"start_source": sv.source, **sv.flags}


def fit_ptmixed(data: LongitudinalDataset, options: FitOptions | None = None) -> FitResult:
    """Fit the Poisson-Tweedie mixed model by maximum likelihood.

    When the starting random-intercept variance falls below
    options.collapse_eps the random intercept is dropped and a PT GLM is
    fitted instead (model_tag "PT-GLM").
    """
    options = options or FitOptions()
    theta0, sflags = _resolve_starts(data, "pt-glmm", options)
    if theta0.ranef_var < options.collapse_eps:
        sflags["collapsed"] = True
        theta_glm = ThetaFull(theta0.beta, theta0.dispersion, theta0.power, 0.0)
        return _fit_family(data, "pt-glm", theta_glm, options, extra_flags=sflags)
    return _fit_family(data, "pt-glmm", theta0, options, extra_flags=sflags)


def fit_nbmixed(data: LongitudinalDataset, options: FitOptions | None = None) -> FitResult:
    """Fit the negative binomial mixed model (power fixed at 0)."""
    options = options or FitOptions()
    theta0, sflags = _resolve_starts(data, "nb-glmm", options)
    if theta0.ranef_var < options.collapse_eps:
        sflags["collapsed"] = True
        theta_glm = ThetaFull(theta0.beta, theta0.dispersion, 0.0, 0.0)
        return _fit_family(data, "nb-glm", theta_glm, options, extra_flags=sflags)
    return _fit_family(data, "nb-glmm", theta0, options, extra_flags=sflags)


def fit_ptglm(data: LongitudinalDataset, options: FitOptions | None = None) -> FitResult:
    """Fit the Poisson-Tweedie GLM (no random effect)."""
    options = options or FitOptions()
    theta0, sflags = _resolve_starts(data, "pt-glm", options)
    theta0 = ThetaFull(theta0.beta, theta0.dispersion, theta0.power, 0.0)
    return _fit_family(data, "pt-glm", theta0, options, extra_flags=sflags)


def fit_nbglm(data: LongitudinalDataset, options: FitOptions | None = None) -> FitResult:
    """Fit the negative binomial GLM (no random effect)."""
    options = options or FitOptions()
    theta0, sflags = _resolve_starts(data, "nb-glm", options)
    theta0 = ThetaFull(theta0.beta, theta0.dispersion, 0.0, 0.0)
    return _fit_family(data, "nb-glm", theta0, options, extra_flags=sflags)


def fit_gene_cascade(data: LongitudinalDataset, options: FitOptions | None = None) -> FitResult:
    """Per-gene fitting protocol for batch runs.

    Tries the PT mixed model with the default warm start; on failure
    retries it from the ML estimates of a negative binomial mixed fit;
    on failure returns that NB fit.  A non-converged result (flagged
    "cascade_failed") means every stage failed.
    """
    options = options or FitOptions()
    fit1 = fit_ptmixed(data, options)
    if fit1.converged:
        return fit1
    nb = fit_nbmixed(data, options)
    if nb.converged:
        starts2 = ThetaFull(
            beta=nb.theta_hat.beta,
            dispersion=max(nb.theta_hat.dispersion, 1.0 + EPS_D),
            power=0.0,
            ranef_var=nb.theta_hat.ranef_var,
        )
        fit2 = fit_ptmixed(data, replace(options, starts=starts2))
        fit2.flags["second_start"] = True
        if fit2.converged:
            return fit2
        nb.flags["pt_failed"] = True
        return nb
    fit1.flags["cascade_failed"] = True
    return fit1


def ranef_blup(fit: FitResult, data: LongitudinalDataset) -> np.ndarray:
    """Posterior modes of the subject random intercepts at the fit.

    Raises:
        FitError: for a fit without a random intercept.
    """
    if not fit.mixed:
        raise FitError(f"random-effect prediction is not applicable to a {fit.model_tag} fit")
    theta = fit.theta_hat
    if theta.ranef_var <= 0.0:
        return np.zeros(data.n_subjects)
    fam, _, _, _, _ = _family_info(fit.family)
    eng = _Engine(data, fam, True, k_quad=5)
    eng.loglik(theta)  # adapts the states at theta
    v_hat, _ = eng.states_in_v(math.sqrt(theta.ranef_var))
    return v_hat
