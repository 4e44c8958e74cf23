import numpy as np
import pytest

from ptglmm import LongitudinalDataset
from ptglmm.simulate import SimDesign, gen_sim_ab


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two subjects, two observations each, small counts."""
    return LongitudinalDataset(
        y=np.array([3, 5, 8, 2]),
        X=np.column_stack([np.ones(4), np.array([0.0, 1.0, 0.0, 1.0])]),
        subject=np.array([0, 0, 1, 1]),
        coef_names=["(intercept)", "x"],
    )


@pytest.fixture(scope="session")
def sim_a_small():
    """One scenario-A dataset at NB shape, 20 subjects."""
    return gen_sim_ab(SimDesign(scenario="A", n=20, power=0.0, seed=42))


def make_nb_glmm_data(n=30, m=5, beta=(2.0, 0.4), dispersion=3.0,
                      ranef_var=0.4, seed=0):
    """NB mixed data with an intercept and one binary covariate."""
    rng = np.random.default_rng(seed)
    subj = np.repeat(np.arange(n), m)
    x = np.repeat((np.arange(n) % 2).astype(float), m)
    X = np.column_stack([np.ones(n * m), x])
    v = rng.normal(0.0, np.sqrt(ranef_var), n)
    mu = np.exp(X @ np.asarray(beta) + v[subj])
    size = mu / (dispersion - 1.0)
    y = rng.poisson(rng.gamma(shape=size, scale=dispersion - 1.0))
    return LongitudinalDataset(y=y, X=X, subject=subj,
                               coef_names=["(intercept)", "x"])
