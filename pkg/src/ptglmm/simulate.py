"""Data generators and scoring for the calibration/power studies.

Two single-gene designs share the linear predictor

    log mu_ij = b0 + b1 * group_i + b2 * time_ij + v_i,    v_i ~ N(0, 0.5)

with n subjects split into two equal groups, five occasions coded
0..4, dispersion 3 (1 in the Poisson corner) and a selectable power:

    scenario A: beta = (2.5, 0.3, 0),   null hypothesis is the time effect
    scenario B: beta = (2.5, 0, 0.2),   null hypothesis is the group effect

Two genomewide designs generate G genes with per-gene parameters drawn
from mixing distributions (sigma^2_g ~ U(0.2, 0.8), D_g - 1 ~ Gamma(2, 1),
power class split 60/20/20 between negative binomial, zero-inflated and
heavy-tailed shapes) plus per-sample N(0, 0.5^2) offsets:

    scenario C: time effect null for 80% of genes, +-U(0.1, 0.5) otherwise
    scenario D: group effect null for 80% of genes, +-U(0.5, 1) otherwise

Scoring reports RMSE over converged fits, convergence rate, and
false/true positive rates at a significance level, optionally after
Benjamini-Hochberg adjustment (the genomewide convention).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from .glmm import (
    FitOptions,
    LongitudinalDataset,
    _pt_consts,
    fit_gene_cascade,
    fit_ptmixed,
)
from .inference import HypothesisSpec, TestRefusedError, bh_adjust, lr_test, wald_test
from .ptdist import SamplingError

__all__ = [
    "SimDesign",
    "ScoreReport",
    "GeneTruth",
    "SimBatch",
    "gen_sim_ab",
    "gen_sim_cd",
    "score",
    "run_study_ab",
    "run_study_cd",
    "ABRecord",
]

_AB_BETA = {"A": (2.5, 0.3, 0.0), "B": (2.5, 0.0, 0.2)}
_AB_TARGET = {"A": "time", "B": "group"}
_AB_POWERS = (-5.0, -1.0, 0.0, 0.5, 1.0)


@dataclass(frozen=True)
class SimDesign:
    """Design of one simulated dataset (or batch of genes for C/D)."""

    scenario: str
    n: int
    seed: int
    m: int = 5
    power: float = 0.0        # scenarios A/B only
    dispersion: float = 3.0   # scenarios A/B only
    ranef_var: float = 0.5    # scenarios A/B only
    beta: tuple | None = None  # override for A/B; defaults per scenario
    genes: int = 500          # scenarios C/D only

    def __post_init__(self):
        s = self.scenario.upper()
        if s not in ("A", "B", "C", "D"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        object.__setattr__(self, "scenario", s)
        if self.n < 2 or self.n % 2:
            raise ValueError("n must be even and >= 2 (two equal groups)")
        if s in ("A", "B"):
            if self.power not in _AB_POWERS:
                raise ValueError(f"power must be one of {_AB_POWERS}")
            if self.power == 1.0 and self.dispersion != 1.0:
                raise ValueError("the Poisson corner (power 1) requires dispersion 1")


def _design_columns(n: int, m: int):
    subj = np.repeat(np.arange(n), m)
    group = np.repeat((np.arange(n) >= n // 2).astype(float), m)
    time = np.tile(np.arange(m, dtype=float), n)
    X = np.column_stack([np.ones(n * m), group, time])
    return subj, group, time, X


def _draw_counts(mu: np.ndarray, dispersion: float, power: float,
                 rng: np.random.Generator) -> np.ndarray:
    """One PT count per entry of mu (shared dispersion/power)."""
    if dispersion <= 1.0:
        return rng.poisson(mu).astype(np.int64)
    u = rng.random(mu.shape[0])
    mu = np.minimum(mu, 1e8)
    cap = int(mu.max() + 20.0 * math.sqrt(dispersion * mu.max()) + 256.0)
    for _ in range(30):
        c, kappa, rho = _pt_consts(dispersion, power, cap + 1)
        y = _kernel.pt_sample_rows(mu, c, kappa, rho, u)
        if np.all(y >= 0):
            return y
        if cap >= 50_000_000:
            break
        cap *= 4
    raise SamplingError("count draw exceeded the maximum supported tail extension")


def gen_sim_ab(design: SimDesign, rng: np.random.Generator | None = None) -> LongitudinalDataset:
    """One dataset of the single-gene designs A/B (deterministic per seed)."""
    if design.scenario not in ("A", "B"):
        raise ValueError("gen_sim_ab handles scenarios A and B")
    rng = rng or np.random.default_rng(design.seed)
    n, m = design.n, design.m
    beta = np.asarray(design.beta if design.beta is not None else _AB_BETA[design.scenario])
    subj, group, time, X = _design_columns(n, m)
    v = (rng.normal(0.0, math.sqrt(design.ranef_var), n)
         if design.ranef_var > 0 else np.zeros(n))
    mu = np.exp(X @ beta + v[subj])
    y = _draw_counts(mu, design.dispersion, design.power, rng)
    return LongitudinalDataset(
        y=y, X=X, subject=subj,
        coef_names=["(intercept)", "group", "time"],
        time=time, group=group,
    )


@dataclass(frozen=True)
class GeneTruth:
    """True per-gene parameters of a C/D batch."""

    gene: str
    beta: tuple
    dispersion: float
    power: float
    ranef_var: float
    null: bool
    shape_class: str  # 'nb' | 'zero-inflated' | 'heavy-tailed'


@dataclass
class SimBatch:
    """Genomewide batch: shared design, per-gene counts and truths."""

    datasets: list
    truth: list
    offsets: np.ndarray


def _split_counts(total: int, fractions):
    counts = [int(round(total * f)) for f in fractions[:-1]]
    counts.append(total - sum(counts))
    return counts


def gen_sim_cd(design: SimDesign, rng: np.random.Generator | None = None) -> SimBatch:
    """One genomewide batch for scenario C or D (deterministic per seed).

    Gene counts scale the 400/50/50 null/up/down and 300/100/100 shape
    splits proportionally when design.genes != 500.
    """
    if design.scenario not in ("C", "D"):
        raise ValueError("gen_sim_cd handles scenarios C and D")
    rng = rng or np.random.default_rng(design.seed)
    n, m, G = design.n, design.m, design.genes
    subj, group, time, X = _design_columns(n, m)
    offsets = rng.normal(0.0, 0.5, n * m)

    n_nb, n_zi, n_ht = _split_counts(G, (0.6, 0.2, 0.2))
    shape_class = np.array(["nb"] * n_nb + ["zero-inflated"] * n_zi + ["heavy-tailed"] * n_ht)
    rng.shuffle(shape_class)
    power = np.zeros(G)
    power[shape_class == "zero-inflated"] = rng.uniform(-10.0, -1.0, n_zi)
    power[shape_class == "heavy-tailed"] = rng.uniform(0.3, 0.7, n_ht)

    n_null, n_up, n_down = _split_counts(G, (0.8, 0.1, 0.1))
    de = np.array([0] * n_null + [1] * n_up + [-1] * n_down)
    rng.shuffle(de)

    sigma2 = rng.uniform(0.2, 0.8, G)
    dispersion = 1.0 + rng.gamma(2.0, 1.0, G)
    beta0 = rng.normal(3.0, 0.5, G)
    if design.scenario == "C":
        beta1 = rng.normal(0.0, 0.3, G)
        beta2 = np.zeros(G)
        beta2[de == 1] = rng.uniform(0.1, 0.5, n_up)
        beta2[de == -1] = rng.uniform(-0.5, -0.1, n_down)
    else:
        beta2 = rng.uniform(-0.1, 0.1, G)
        beta1 = np.zeros(G)
        beta1[de == 1] = rng.uniform(0.5, 1.0, n_up)
        beta1[de == -1] = rng.uniform(-1.0, -0.5, n_down)

    datasets, truth = [], []
    coef_names = ["(intercept)", "group", "time"]
    for g in range(G):
        v = rng.normal(0.0, math.sqrt(sigma2[g]), n)
        mu = np.exp(X @ np.array([beta0[g], beta1[g], beta2[g]]) + offsets + v[subj])
        y = _draw_counts(mu, dispersion[g], power[g], rng)
        datasets.append(LongitudinalDataset(
            y=y, X=X, subject=subj, offset=offsets,
            coef_names=coef_names, time=time, group=group,
        ))
        truth.append(GeneTruth(
            gene=f"gene{g:04d}",
            beta=(beta0[g], beta1[g], beta2[g]),
            dispersion=float(dispersion[g]),
            power=float(power[g]),
            ranef_var=float(sigma2[g]),
            null=bool(de[g] == 0),
            shape_class=str(shape_class[g]),
        ))
    return SimBatch(datasets=datasets, truth=truth, offsets=offsets)


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------


@dataclass
class ScoreReport:
    """Aggregate accuracy/calibration metrics of a study."""

    scenario: str
    alpha: float
    n_replicates: int
    n_converged: int
    convergence_rate: float
    rmse: dict
    fpr: float | None
    tpr: float | None
    adjusted: bool
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "alpha": self.alpha,
            "n_replicates": self.n_replicates,
            "n_converged": self.n_converged,
            "convergence_rate": self.convergence_rate,
            "rmse": self.rmse,
            "fpr": self.fpr,
            "tpr": self.tpr,
            "adjusted": self.adjusted,
            **self.extras,
        }


def score(estimates, truths, p_values, null_flags, converged, alpha: float,
          adjust: bool = False, scenario: str = "") -> ScoreReport:
    """Score a collection of fits against the generating truth.

    Args:
        estimates: sequence of coefficient mappings (or None for failed
            fits), one per unit (replicate or gene).
        truths: matching sequence of true-coefficient mappings.
        p_values: raw p-value per unit (NaN when unavailable).
        null_flags: True where the tested effect is truly null.
        converged: convergence flag per unit.
        alpha: significance level.
        adjust: apply Benjamini-Hochberg before thresholding (the
            genomewide convention; raw p-values otherwise).
        scenario: label copied into the report.

    RMSE is computed over converged units only; the convergence rate keeps
    the full denominator.  Units without a usable p-value are excluded
    from the rate denominators.
    """
    converged = np.asarray(converged, dtype=bool)
    n = converged.size
    if n == 0 or not np.any(converged):
        raise ValueError("no converged fits to score")
    null_flags = np.asarray(null_flags, dtype=bool)
    p = np.asarray(p_values, dtype=float)
    if adjust:
        p = bh_adjust(p)
    rmse = {}
    keys = next(t.keys() for t, c in zip(truths, converged) if c)
    for key in keys:
        errs = [
            est[key] - tr[key]
            for est, tr, c in zip(estimates, truths, converged)
            if c and est is not None
        ]
        rmse[key] = float(np.sqrt(np.mean(np.square(errs)))) if errs else float("nan")
    usable = converged & ~np.isnan(p)
    nulls = usable & null_flags
    signals = usable & ~null_flags
    fpr = float(np.mean(p[nulls] < alpha)) if np.any(nulls) else None
    tpr = float(np.mean(p[signals] < alpha)) if np.any(signals) else None
    return ScoreReport(
        scenario=scenario,
        alpha=alpha,
        n_replicates=n,
        n_converged=int(converged.sum()),
        convergence_rate=float(converged.mean()),
        rmse=rmse,
        fpr=fpr,
        tpr=tpr,
        adjusted=adjust,
    )


# --------------------------------------------------------------------------
# replicate studies
# --------------------------------------------------------------------------


@dataclass
class ABRecord:
    """Per-replicate outcome of a single-gene study."""

    replicate: int
    converged: bool
    estimates: dict | None
    p_wald: float
    p_lrt: float
    model_tag: str
    n_loglik_evals: int


def _ab_replicate(args):
    (rep, scenario, n, power, dispersion, ranef_var, seed, k_quad,
     do_lrt, fit_options) = args
    design = SimDesign(scenario=scenario, n=n, power=power,
                       dispersion=dispersion, ranef_var=ranef_var,
                       seed=seed)
    data = gen_sim_ab(design)
    target = _AB_TARGET[scenario]
    options = fit_options or FitOptions(k_quad=k_quad)
    fit = fit_ptmixed(data, options)
    p_wald = float("nan")
    estimates = None
    if fit.converged:
        estimates = dict(zip(fit.coef_names, fit.theta_hat.beta))
        estimates["dispersion"] = fit.theta_hat.dispersion
        estimates["power"] = fit.theta_hat.power
        estimates["ranef_var"] = fit.theta_hat.ranef_var
        try:
            p_wald = wald_test(fit, HypothesisSpec.for_coefficients(target, fit.coef_names)).p_value
        except TestRefusedError:
            pass
    p_lrt = float("nan")
    if do_lrt and fit.converged:
        from dataclasses import replace as _replace

        null_fit = fit_ptmixed(data.without_columns(target),
                               _replace(options, starts=None, compute_vcov=False))
        if null_fit.converged:
            try:
                p_lrt = lr_test(fit, null_fit, df=1).p_value
            except TestRefusedError:
                pass
    return ABRecord(
        replicate=rep,
        converged=fit.converged,
        estimates=estimates,
        p_wald=p_wald,
        p_lrt=p_lrt,
        model_tag=fit.model_tag,
        n_loglik_evals=fit.n_loglik_evals,
    )


def _run_pool(worker, tasks, workers: int):
    if workers <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, tasks, chunksize=1))


def run_study_ab(scenario: str, power: float, n: int, replicates: int, seed: int,
                 alpha: float = 0.05, k_quad: int = 5, do_lrt: bool = True,
                 workers: int = 1, dispersion: float | None = None,
                 ranef_var: float = 0.5,
                 fit_options: FitOptions | None = None):
    """Replicated scenario-A/B study; returns (records, ScoreReport).

    Replicate r uses the derived seed SeedSequence(seed, r) so results do
    not depend on the worker count.
    """
    scenario = scenario.upper()
    if dispersion is None:
        dispersion = 1.0 if power == 1.0 else 3.0
    seeds = [np.random.SeedSequence(entropy=seed, spawn_key=(r,)).generate_state(1)[0]
             for r in range(replicates)]
    tasks = [
        (r, scenario, n, power, dispersion, ranef_var, int(seeds[r]), k_quad,
         do_lrt, fit_options)
        for r in range(replicates)
    ]
    records = _run_pool(_ab_replicate, tasks, workers)
    records.sort(key=lambda rec: rec.replicate)
    beta = _AB_BETA[scenario]
    truth = {
        "(intercept)": beta[0], "group": beta[1], "time": beta[2],
        "dispersion": dispersion, "power": power, "ranef_var": ranef_var,
    }
    target = _AB_TARGET[scenario]
    report = score(
        estimates=[rec.estimates for rec in records],
        truths=[truth] * len(records),
        p_values=[rec.p_wald for rec in records],
        null_flags=[truth[target] == 0.0] * len(records),
        converged=[rec.converged for rec in records],
        alpha=alpha,
        adjust=False,
        scenario=scenario,
    )
    p_lrt = np.array([rec.p_lrt for rec in records])
    usable = np.array([rec.converged for rec in records]) & ~np.isnan(p_lrt)
    if truth[target] == 0.0 and np.any(usable):
        report.extras["fpr_lrt"] = float(np.mean(p_lrt[usable] < alpha))
    elif np.any(usable):
        report.extras["tpr_lrt"] = float(np.mean(p_lrt[usable] < alpha))
    return records, report


def _cd_gene(args):
    idx, data, target, k_quad = args
    fit = fit_gene_cascade(data, FitOptions(k_quad=k_quad))
    p = float("nan")
    est = None
    if fit.converged:
        est = dict(zip(fit.coef_names, fit.theta_hat.beta))
        try:
            p = wald_test(fit, HypothesisSpec.for_coefficients(target, fit.coef_names)).p_value
        except TestRefusedError:
            pass
    return idx, fit.converged, fit.model_tag, est, p


def run_study_cd(scenario: str, genes: int, n: int, replicates: int, seed: int,
                 alpha: float = 0.05, k_quad: int = 5, workers: int = 1):
    """Replicated genomewide study; returns (per-replicate tables, report).

    Within each replicate the target-coefficient Wald p-values are
    Benjamini-Hochberg adjusted across genes before thresholding; the
    reported FPR/TPR average the per-replicate rates over converged genes.
    """
    scenario = scenario.upper()
    target = "time" if scenario == "C" else "group"
    key = {"C": "time", "D": "group"}[scenario]
    tables = []
    fprs, tprs, convs = [], [], []
    rmse_errs = []
    for r in range(replicates):
        rep_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(r,)).generate_state(1)[0])
        batch = gen_sim_cd(SimDesign(scenario=scenario, n=n, seed=rep_seed, genes=genes))
        tasks = [(g, batch.datasets[g], target, k_quad) for g in range(genes)]
        results = _run_pool(_cd_gene, tasks, workers)
        results.sort(key=lambda t: t[0])
        conv = np.array([r_[1] for r_ in results])
        p_raw = np.array([r_[4] for r_ in results])
        padj = bh_adjust(p_raw)
        nulls = np.array([batch.truth[g].null for g in range(genes)])
        usable = conv & ~np.isnan(padj)
        if np.any(usable & nulls):
            fprs.append(float(np.mean(padj[usable & nulls] < alpha)))
        if np.any(usable & ~nulls):
            tprs.append(float(np.mean(padj[usable & ~nulls] < alpha)))
        convs.append(float(conv.mean()))
        truth_key = {"time": 2, "group": 1}[key]
        for g, ok, _tag, est, _p in results:
            if ok and est is not None:
                rmse_errs.append(est[key] - batch.truth[g].beta[truth_key])
        tables.append({
            "replicate": r,
            "gene": [batch.truth[g].gene for g in range(genes)],
            "converged": conv.tolist(),
            "model_tag": [r_[2] for r_ in results],
            "p_raw": p_raw.tolist(),
            "p_adj": padj.tolist(),
            "null": nulls.tolist(),
        })
    report = ScoreReport(
        scenario=scenario,
        alpha=alpha,
        n_replicates=replicates,
        n_converged=int(round(np.mean(convs) * genes)),
        convergence_rate=float(np.mean(convs)),
        rmse={key: float(np.sqrt(np.mean(np.square(rmse_errs))))} if rmse_errs else {},
        fpr=float(np.mean(fprs)) if fprs else None,
        tpr=float(np.mean(tprs)) if tprs else None,
        adjusted=True,
        extras={"per_replicate_fpr": fprs, "per_replicate_tpr": tprs},
    )
    return tables, report
