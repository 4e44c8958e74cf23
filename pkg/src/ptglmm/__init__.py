"""Poisson-Tweedie mixed-effects models for longitudinal count data."""

from .ptdist import (
    A_MIN,
    A_PROFILE_GRID,
    EPS_D,
    MomentEstimates,
    PmfEvaluationError,
    PtDomainError,
    PtParams,
    SamplingError,
    pt_log_pmf,
    pt_log_pmf_vector,
    pt_mom_estimates,
    pt_moments,
    pt_pmf,
    pt_pmf_vector,
    pt_sample,
)
from .quadrature import (
    AdaptationError,
    AdaptiveState,
    IntegrationError,
    QuadratureRule,
    adapt,
    aghq_log_integral,
    gh_rule,
)
from .special import chi2_cdf, chi2_sf, gamma_p, gamma_q
from .glmm import (
    DataError,
    FitError,
    FitOptions,
    FitResult,
    LongitudinalDataset,
    StartingValues,
    ThetaFull,
    fit_gene_cascade,
    fit_nbglm,
    fit_nbmixed,
    fit_ptglm,
    fit_ptmixed,
    marginal_loglik,
    numeric_hessian,
    observed_information,
    poisson_glm_irls,
    ranef_blup,
    starting_values,
)
from .inference import (
    HypothesisSpec,
    TestError,
    TestRefusedError,
    TestResult,
    bh_adjust,
    lr_test,
    wald_test,
)

__version__ = "0.1.0"
