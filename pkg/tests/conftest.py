import numpy as np
import pytest

from jobpower.config.run_config import HyperPriors, UpdateConfig
from jobpower.services.core_model import JobParams, JobSeries, ParentParams
from jobpower.services.machine_sim import load_reference_parent


def make_parent(tau2: float = 1.0, n_components: int = 2, **overrides) -> ParentParams:
    values = dict(
        mu_sigma=0.0,
        sigma2_sigma=0.25,
        mu_rho=-1.0,
        sigma2_rho=0.25,
        u=np.full(n_components, 0.5),
        nu=np.linspace(0.0, 10.0, n_components),
        varsigma2=np.ones(n_components),
        alpha_lambda=1.0,
        beta_lambda=5.0,
        gamma=1.0,
        delta=1.0,
        tau2=tau2,
    )
    values.update(overrides)
    return ParentParams(**values)


def make_job(length: int, lam=(0.3, 0.4), v=(0.6, 0.5), mu=(0.0, 1.0), sigma2: float = 1.0,
             rho: float = 0.5, n_replicates: int = 1) -> JobParams:
    k = len(lam)
    return JobParams(
        xi=np.zeros((n_replicates, length), dtype=int),
        phi=np.zeros((n_replicates, length), dtype=bool),
        lam=np.array(lam, dtype=float),
        v=np.array(v, dtype=float),
        mu=np.array(mu, dtype=float),
        psi=np.zeros(k, dtype=int),
        z=np.zeros((n_replicates, length)),
        sigma2=sigma2,
        rho=rho,
    )


@pytest.fixture
def reference_parent() -> ParentParams:
    return load_reference_parent()


@pytest.fixture
def small_hypers() -> HyperPriors:
    return HyperPriors(n_regimes=3, n_components=4, m_nu=2500.0, s2_nu=1.0e6,
                       a_varsigma=2.0, b_varsigma=5000.0, a_tau=3.0, b_tau=200.0,
                       m_sigma=7.0, m_rho=-1.5)


@pytest.fixture
def fast_update() -> UpdateConfig:
    return UpdateConfig(n_iterations=40, burn_in=20, seed=3, progress_every=1000)


@pytest.fixture
def peaked_trace() -> np.ndarray:
    """Ten-minute trace with two minutes at 4 kW"""
    return np.array([1000.0, 1500.0, 2000.0, 4000.0, 4000.0, 2500.0, 2000.0, 1500.0, 1000.0, 1000.0])


@pytest.fixture
def level_history() -> JobSeries:
    rng = np.random.default_rng(11)
    return JobSeries("steady", 3400.0 + rng.normal(0.0, 20.0, (1, 30)))
