"""
Hybrid Gibbs / Metropolis-Hastings sampler for the hierarchical job power model.

Each iteration runs (i) the job-specific updates for every job, which are
conditionally independent given the parent and may run concurrently, then
(ii) the parent updates. Every job update draws from its own labeled random
stream keyed by (chain, job, iteration), so a threaded sweep reproduces the
sequential one exactly and a resumed chain reproduces the uninterrupted one.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy.special import gammaln, log_ndtr, ndtri_exp

from jobpower.config.run_config import HyperPriors, McmcConfig
from jobpower.config.settings import settings
from jobpower.services.core_model import (
    JobParams,
    JobSeries,
    ParentParams,
    categorical,
    clip_fraction,
    inverse_gamma,
    log_stationary_from_rates,
    pi_from_v,
    sample_job_from_parent,
    sample_parent_from_hyperpriors,
    transition_matrix,
)
from jobpower.services.ou_process import ar1_log_density, ar1_quadratic_form, sample_residual_path
from jobpower.utils.exceptions import (
    DataFormatError,
    DegenerateLikelihoodError,
    DomainError,
    JobPowerException,
    NumericalError,
    SamplerError,
)
from jobpower.utils.monitoring import monitor, monitor_performance
from jobpower.utils.rng import stream

logger = structlog.get_logger(__name__)

MhCounts = Dict[str, List[int]]
CHECKPOINT_SCHEMA = "jobpower.checkpoint/1"


# ---------------------------------------------------------------------------
# Densities and generic MH moves
# ---------------------------------------------------------------------------

def log_normal_logpdf(value: float, mean: float, var: float) -> float:
    """Density of a positive value whose log is N(mean, var)"""
    lv = np.log(value)
    return float(-lv - 0.5 * np.log(2.0 * np.pi * var) - (lv - mean) ** 2 / (2.0 * var))


def inverse_gamma_logpdf(value: float, shape: float, rate: float) -> float:
    return float(shape * np.log(rate) - gammaln(shape) - (shape + 1.0) * np.log(value) - rate / value)


def lognormal_to_inverse_gamma(mean: float, var: float) -> Optional[Tuple[float, float]]:
    """
    Inverse-gamma (shape, rate) with the same mean and variance as the
    log-normal with log-mean ``mean`` and log-variance ``var``.

    Returns None when no finite inverse-gamma matches.
    """
    with np.errstate(over="ignore", divide="ignore"):
        c = np.expm1(var)
        if not np.isfinite(c) or c <= 0:
            return None
        shape = 2.0 + 1.0 / c
        rate = np.exp(mean + 0.5 * var) * (shape - 1.0)
    if not (np.isfinite(shape) and np.isfinite(rate)) or rate <= 0:
        return None
    return float(shape), float(rate)


def independence_mh(
    current: float,
    proposal: float,
    log_target: Callable[[float], float],
    log_proposal: Callable[[float], float],
    rng: np.random.Generator,
) -> Tuple[float, bool]:
    """Accept or reject an independence proposal"""
    with np.errstate(invalid="ignore"):
        log_ratio = (log_target(proposal) - log_target(current)
                     + log_proposal(current) - log_proposal(proposal))
    if np.log(rng.random()) < log_ratio:
        return float(proposal), True
    return float(current), False


def log_random_walk_mh(
    current: float,
    log_target: Callable[[float], float],
    scale2: float,
    rng: np.random.Generator,
) -> Tuple[float, bool]:
    """Random walk on the log scale with variance ``scale2``, Jacobian included"""
    proposal = current * np.exp(np.sqrt(scale2) * rng.standard_normal())
    with np.errstate(invalid="ignore"):
        log_ratio = log_target(proposal) - log_target(current) + np.log(proposal) - np.log(current)
    if np.log(rng.random()) < log_ratio:
        return float(proposal), True
    return float(current), False


def truncated_normal_above(mean, sd, lower, rng: np.random.Generator) -> np.ndarray:
    """
    Draw N(mean, sd^2) conditioned on being >= lower by inverting the tail CDF
    in log space, which stays exact far into the tail.
    """
    mean = np.asarray(mean, dtype=float)
    alpha = (np.asarray(lower, dtype=float) - mean) / sd
    u = 1.0 - rng.random(alpha.shape)
    standard = -ndtri_exp(np.log(u) + log_ndtr(-alpha))
    return np.maximum(mean + sd * np.maximum(standard, alpha), lower)


def categorical_log(rng: np.random.Generator, log_weights: np.ndarray) -> np.ndarray:
    """Row-wise categorical draws from unnormalized log weights"""
    top = log_weights.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateLikelihoodError("all categorical weights vanish")
    return categorical(rng, np.exp(log_weights - top))


def _count(counts: MhCounts, step: str, accepted: bool) -> None:
    entry = counts.setdefault(step, [0, 0])
    entry[0] += 1
    entry[1] += int(accepted)


def _observations(job: Union[JobSeries, np.ndarray]) -> np.ndarray:
    if isinstance(job, JobSeries):
        return np.asarray(job.watts)
    return np.atleast_2d(np.asarray(job, dtype=float))


def _initial_log_prob(lam: np.ndarray, pi: np.ndarray, xi: np.ndarray) -> float:
    """Log stationary probability of the first regime of every replicate"""
    if xi.shape[1] == 0:
        return 0.0
    return float(log_stationary_from_rates(lam, pi)[xi[:, 0]].sum())


# ---------------------------------------------------------------------------
# Step (i): job-specific updates
# ---------------------------------------------------------------------------

def update_censored(job: JobSeries, theta: JobParams, parent: ParentParams, rng: np.random.Generator) -> np.ndarray:
    """Impute every censored reading from its normal law truncated below at the cap"""
    x = np.array(job.watts, dtype=float)
    mask = job.censored
    if not mask.any():
        return x
    mean = theta.mu[theta.xi[mask]] + theta.z[mask]
    x[mask] = truncated_normal_above(mean, np.sqrt(parent.tau2), job.caps[mask], rng)
    return x


def update_regime_path(
    job: Union[JobSeries, np.ndarray],
    theta: JobParams,
    parent: ParentParams,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Single-site sweep over xi in time order, then redraw phi.

    The weight of regime k at minute t combines P[xi(t-1), k], P[k, xi(t+1)]
    and the observation density; at t = 0 the stationary probability takes the
    place of the incoming transition. Weights are kept in log space.
    """
    x = _observations(job)
    k = theta.n_regimes
    xi = theta.xi.copy()
    n_rep, length = xi.shape
    phi = np.zeros(xi.shape, dtype=bool)
    if length == 0:
        return xi, phi

    lam, pi = theta.lam, theta.pi
    with np.errstate(divide="ignore"):
        log_tpm = np.log(transition_matrix(lam, pi))
    log_s0 = log_stationary_from_rates(lam, pi)
    stay_possible = lam * pi / (lam * pi + 1.0 - lam)

    for r in range(n_rep):
        resid = x[r][:, None] - theta.mu[None, :] - theta.z[r][:, None]
        loglik = -0.5 * resid * resid / parent.tau2
        u = rng.random(length)
        path = xi[r]
        for t in range(length):
            w = loglik[t] + (log_s0 if t == 0 else log_tpm[path[t - 1]])
            if t < length - 1:
                w = w + log_tpm[:, path[t + 1]]
            top = w.max()
            if not np.isfinite(top):
                raise DegenerateLikelihoodError(f"all {k} regime weights vanish at minute {t}")
            cum = np.cumsum(np.exp(w - top))
            path[t] = min(int(np.searchsorted(cum, u[t] * cum[-1], side="right")), k - 1)

        changed = path[1:] != path[:-1]
        coin = rng.random(length - 1) < stay_possible[path[1:]]
        phi[r, 1:] = changed | coin
    return xi, phi


def transition_counts(theta: JobParams) -> Tuple[np.ndarray, np.ndarray]:
    """(N_k, M_k): minutes spent in k before the last one, and how many were followed by phi = 1"""
    k = theta.n_regimes
    prev = theta.xi[:, :-1].ravel()
    possible = theta.phi[:, 1:].ravel()
    return np.bincount(prev, minlength=k), np.bincount(prev[possible], minlength=k)


def update_rates(theta: JobParams, parent: ParentParams, rng: np.random.Generator) -> Tuple[np.ndarray, bool]:
    """
    lam_k from Beta(alpha + M_k, beta + N_k - M_k), used as a proposal and
    corrected for the stationary law of the first regime.
    """
    n_k, m_k = transition_counts(theta)
    proposal = clip_fraction(rng.beta(parent.alpha_lambda + m_k, parent.beta_lambda + n_k - m_k))
    pi = theta.pi
    log_ratio = _initial_log_prob(proposal, pi, theta.xi) - _initial_log_prob(theta.lam, pi, theta.xi)
    if np.log(rng.random()) < log_ratio:
        return proposal, True
    return theta.lam.copy(), False


def update_transition_probs(theta: JobParams, parent: ParentParams, rng: np.random.Generator) -> Tuple[np.ndarray, bool]:
    """
    v_k from Beta(#landings on k + 1, #landings beyond k + delta) for k < K-1;
    the unused last fraction is drawn from its prior Beta(1, delta).
    """
    k = theta.n_regimes
    landed = theta.xi[:, 1:][theta.phi[:, 1:]]
    hits = np.bincount(landed, minlength=k)
    beyond = hits[::-1].cumsum()[::-1] - hits

    proposal = np.empty(k)
    proposal[:-1] = rng.beta(hits[:-1] + 1.0, beyond[:-1] + parent.delta)
    proposal[-1] = rng.beta(1.0, parent.delta)
    proposal = clip_fraction(proposal)

    log_ratio = (_initial_log_prob(theta.lam, pi_from_v(proposal), theta.xi)
                 - _initial_log_prob(theta.lam, theta.pi, theta.xi))
    if np.log(rng.random()) < log_ratio:
        return proposal, True
    return theta.v.copy(), False


def update_regime_means(
    job: Union[JobSeries, np.ndarray],
    theta: JobParams,
    parent: ParentParams,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Conjugate normal draw of mu given its parent component, then the component memberships psi"""
    x = _observations(job)
    k = theta.n_regimes
    labels = theta.xi.ravel()
    n_k = np.bincount(labels, minlength=k)
    sum_k = np.bincount(labels, weights=(x - theta.z).ravel(), minlength=k)

    nu = parent.nu[theta.psi]
    vs2 = parent.varsigma2[theta.psi]
    post_var = 1.0 / (1.0 / vs2 + n_k / parent.tau2)
    post_mean = post_var * (nu / vs2 + sum_k / parent.tau2)
    mu = rng.normal(post_mean, np.sqrt(post_var))

    with np.errstate(divide="ignore"):
        log_omega = np.log(parent.omega)
    log_w = (log_omega[None, :] - 0.5 * np.log(parent.varsigma2)[None, :]
             - 0.5 * (mu[:, None] - parent.nu[None, :]) ** 2 / parent.varsigma2[None, :])
    psi = categorical_log(rng, log_w)
    return mu, psi


def update_residual_process(
    job: Union[JobSeries, np.ndarray],
    theta: JobParams,
    parent: ParentParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Joint draw of z per replicate from its tridiagonal-precision Gaussian conditional"""
    resid = _observations(job) - theta.mu[theta.xi]
    z = np.empty(resid.shape)
    for r in range(resid.shape[0]):
        z[r] = sample_residual_path(resid[r], theta.sigma2, theta.rho, parent.tau2, rng)
    return z


def update_ou_variance(
    theta: JobParams,
    parent: ParentParams,
    rng: np.random.Generator,
    rw_scale: float = 0.25,
    log_prior: Optional[Callable[[float], float]] = None,
) -> Tuple[float, bool]:
    """
    MH update of sigma2.

    The log-normal prior is moment-matched to IG(a, b) and IG(a + n/2, b + q/2)
    proposed independently; when no finite match exists a log-scale random
    walk is used instead.
    """
    if log_prior is None:
        def log_prior(s2: float) -> float:
            return log_normal_logpdf(s2, parent.mu_sigma, parent.sigma2_sigma)

    q, n, _ = ar1_quadratic_form(theta.z, theta.rho)

    def log_target(s2: float) -> float:
        return log_prior(s2) - 0.5 * n * np.log(s2) - 0.5 * q / s2

    matched = lognormal_to_inverse_gamma(parent.mu_sigma, parent.sigma2_sigma)
    if matched is None:
        return log_random_walk_mh(theta.sigma2, log_target, rw_scale, rng)

    shape, rate = matched[0] + 0.5 * n, matched[1] + 0.5 * q
    proposal = float(inverse_gamma(rng, shape, rate))
    return independence_mh(
        theta.sigma2, proposal, log_target,
        lambda s2: inverse_gamma_logpdf(s2, shape, rate), rng,
    )


def update_ou_range(
    theta: JobParams,
    parent: ParentParams,
    rng: np.random.Generator,
    rw_scale: float = 0.25,
) -> Tuple[float, bool]:
    """Log-scale random-walk MH update of rho"""
    def log_target(rho: float) -> float:
        return (log_normal_logpdf(rho, parent.mu_rho, parent.sigma2_rho)
                + ar1_log_density(theta.z, theta.sigma2, rho))

    return log_random_walk_mh(theta.rho, log_target, rw_scale, rng)


def update_job_state(
    series: JobSeries,
    theta: JobParams,
    x: np.ndarray,
    parent: ParentParams,
    config: McmcConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, MhCounts]:
    """
    One full step (i) sweep for one job; ``theta`` is updated in place.

    Returns:
        (imputed observations, MH counts)
    """
    counts: MhCounts = {}
    if series.has_censoring:
        x = update_censored(series, theta, parent, rng)
    theta.xi, theta.phi = update_regime_path(x, theta, parent, rng)

    theta.lam, accepted = update_rates(theta, parent, rng)
    _count(counts, "lambda", accepted)
    theta.v, accepted = update_transition_probs(theta, parent, rng)
    _count(counts, "v", accepted)

    theta.mu, theta.psi = update_regime_means(x, theta, parent, rng)
    theta.z = update_residual_process(x, theta, parent, rng)

    theta.sigma2, accepted = update_ou_variance(theta, parent, rng, config.sigma2_rw_scale)
    _count(counts, "sigma2", accepted)
    theta.rho, accepted = update_ou_range(theta, parent, rng, config.rho_rw_scale)
    _count(counts, "rho", accepted)
    return x, counts


# ---------------------------------------------------------------------------
# Step (ii): parent updates
# ---------------------------------------------------------------------------

def _normal_mean_then_variance(
    y: np.ndarray,
    mean: float,
    var: float,
    prior_mean: float,
    prior_var: float,
    shape: float,
    rate: float,
    rng: np.random.Generator,
) -> Tuple[float, float]:
    """Gibbs pair for (mean, variance) of normal observations ``y``"""
    n = y.size
    post_var = 1.0 / (1.0 / prior_var + n / var)
    post_mean = post_var * (prior_mean / prior_var + y.sum() / var)
    mean = rng.normal(post_mean, np.sqrt(post_var))
    var = inverse_gamma(rng, shape + 0.5 * n, rate + 0.5 * np.sum((y - mean) ** 2))
    return float(mean), float(var)


def update_parent(
    jobs: Sequence[JobParams],
    observations: Sequence[np.ndarray],
    parent: ParentParams,
    hypers: HyperPriors,
    rng: np.random.Generator,
    config: Optional[McmcConfig] = None,
) -> Tuple[ParentParams, MhCounts]:
    """
    Resample every parent parameter from its full conditional given all jobs.

    ``observations`` holds each job's (imputed) readings, used for tau2.
    """
    config = config or McmcConfig()
    counts: MhCounts = {}
    new = parent.copy()
    m = new.n_components

    log_sigma2 = np.log([j.sigma2 for j in jobs]) if jobs else np.zeros(0)
    new.mu_sigma, new.sigma2_sigma = _normal_mean_then_variance(
        log_sigma2, new.mu_sigma, new.sigma2_sigma,
        hypers.m_sigma, hypers.s2_sigma, hypers.a_sigma, hypers.b_sigma, rng,
    )
    log_rho = np.log([j.rho for j in jobs]) if jobs else np.zeros(0)
    new.mu_rho, new.sigma2_rho = _normal_mean_then_variance(
        log_rho, new.mu_rho, new.sigma2_rho,
        hypers.m_rho, hypers.s2_rho, hypers.a_rho, hypers.b_rho, rng,
    )

    # Mixture memberships and sticks
    psi = np.concatenate([j.psi for j in jobs]) if jobs else np.zeros(0, dtype=int)
    mu = np.concatenate([j.mu for j in jobs]) if jobs else np.zeros(0)
    members = np.bincount(psi, minlength=m)
    beyond = members[::-1].cumsum()[::-1] - members
    u = np.empty(m)
    u[:-1] = rng.beta(1.0 + members[:-1], new.gamma + beyond[:-1])
    u[-1] = rng.beta(1.0, new.gamma)
    new.u = clip_fraction(u)
    new.gamma = float(rng.gamma(hypers.a_gamma + m, 1.0 / (hypers.b_gamma - np.log1p(-new.u).sum())))

    sums = np.bincount(psi, weights=mu, minlength=m)
    post_var = 1.0 / (1.0 / hypers.s2_nu + members / new.varsigma2)
    post_mean = post_var * (hypers.m_nu / hypers.s2_nu + sums / new.varsigma2)
    new.nu = rng.normal(post_mean, np.sqrt(post_var))
    sq = np.bincount(psi, weights=(mu - new.nu[psi]) ** 2, minlength=m)
    new.varsigma2 = inverse_gamma(rng, hypers.a_varsigma + 0.5 * members, hypers.b_varsigma + 0.5 * sq)

    # Job-level stick concentration
    v = np.concatenate([j.v for j in jobs]) if jobs else np.zeros(0)
    new.delta = float(rng.gamma(hypers.a_delta + v.size, 1.0 / (hypers.b_delta - np.log1p(-v).sum())))

    # Observation noise
    n_obs, ss = 0, 0.0
    for job, x in zip(jobs, observations):
        resid = x - job.mu[job.xi] - job.z
        n_obs += resid.size
        ss += float(np.sum(resid * resid))
    new.tau2 = float(inverse_gamma(rng, hypers.a_tau + 0.5 * n_obs, hypers.b_tau + 0.5 * ss))

    # Beta hypers of the transition rates
    lam = np.concatenate([j.lam for j in jobs]) if jobs else np.zeros(0)
    sum_log_lam = np.log(lam).sum()
    sum_log_1m = np.log1p(-lam).sum()

    def log_target_alpha(alpha: float) -> float:
        return ((hypers.a_lambda - 1.0) * np.log(alpha) - hypers.b_lambda * alpha
                + lam.size * (gammaln(alpha + new.beta_lambda) - gammaln(alpha))
                + (alpha - 1.0) * sum_log_lam)

    new.alpha_lambda, accepted = log_random_walk_mh(new.alpha_lambda, log_target_alpha, config.alpha_lambda_rw_scale, rng)
    _count(counts, "alpha_lambda", accepted)

    def log_target_beta(beta: float) -> float:
        return ((hypers.c_lambda - 1.0) * np.log(beta) - hypers.d_lambda * beta
                + lam.size * (gammaln(new.alpha_lambda + beta) - gammaln(beta))
                + (beta - 1.0) * sum_log_1m)

    new.beta_lambda, accepted = log_random_walk_mh(new.beta_lambda, log_target_beta, config.beta_lambda_rw_scale, rng)
    _count(counts, "beta_lambda", accepted)

    for name in ("mu_sigma", "sigma2_sigma", "mu_rho", "sigma2_rho"):
        setattr(new, name, float(getattr(new, name)))
    return new, counts


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSample:
    """Parameters after one stored iteration"""

    iteration: int
    jobs: List[JobParams]
    parent: ParentParams

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "parent": self.parent.to_dict(),
            "jobs": [j.to_dict() for j in self.jobs],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PosteriorSample":
        return cls(
            iteration=int(data["iteration"]),
            jobs=[JobParams.from_dict(j) for j in data["jobs"]],
            parent=ParentParams.from_dict(data["parent"]),
        )


@dataclass
class ChainState:
    """Everything needed to continue a chain, including the samples stored so far"""

    chain_id: int
    iteration: int
    job_ids: List[str]
    parent: ParentParams
    jobs: List[JobParams]
    observations: List[np.ndarray]
    mh_counts: MhCounts = field(default_factory=dict)
    samples: List[PosteriorSample] = field(default_factory=list)

    def to_dict(self, seed: int) -> Dict[str, Any]:
        return {
            "schema": CHECKPOINT_SCHEMA,
            "seed": int(seed),
            "chain_id": self.chain_id,
            "iteration": self.iteration,
            "parent": self.parent.to_dict(),
            "mh_counts": {k: list(v) for k, v in sorted(self.mh_counts.items())},
            "jobs": [
                {
                    "job_id": job_id,
                    "params": params.to_dict(),
                    "observations": x.tolist(),
                    "summary": {
                        "mu": params.mu[np.unique(params.xi)].tolist() if params.length else [],
                        "sigma2": params.sigma2,
                        "rho": params.rho,
                        "regimes_visited": int(np.unique(params.xi).size),
                    },
                }
                for job_id, params, x in zip(self.job_ids, self.jobs, self.observations)
            ],
            "samples": [s.to_dict() for s in self.samples],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Tuple["ChainState", int]:
        if data.get("schema") != CHECKPOINT_SCHEMA:
            raise DataFormatError(f"Unsupported checkpoint schema: {data.get('schema')}")
        try:
            jobs = [JobParams.from_dict(entry["params"]) for entry in data["jobs"]]
            observations = [
                np.array(entry["observations"], dtype=float).reshape(job.xi.shape)
                for entry, job in zip(data["jobs"], jobs)
            ]
            state = cls(
                chain_id=int(data["chain_id"]),
                iteration=int(data["iteration"]),
                job_ids=[entry["job_id"] for entry in data["jobs"]],
                parent=ParentParams.from_dict(data["parent"]),
                jobs=jobs,
                observations=observations,
                mh_counts={k: list(v) for k, v in data.get("mh_counts", {}).items()},
                samples=[PosteriorSample.from_dict(s) for s in data.get("samples", [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed checkpoint: {e}") from e
        return state, int(data["seed"])


@dataclass
class ChainResult:
    """Stored samples of one chain plus its final state"""

    chain_id: int
    job_ids: List[str]
    samples: List[PosteriorSample]
    acceptance: Dict[str, float]
    state: ChainState

    def parent_trace(self, name: str) -> np.ndarray:
        return np.array([getattr(s.parent, name) for s in self.samples])

    def job_trace(self, job_index: int) -> List[JobParams]:
        return [s.jobs[job_index] for s in self.samples]


def save_checkpoint(path: str, state: ChainState, seed: int) -> None:
    from jobpower.services.trace_io import write_json

    write_json(path, state.to_dict(seed))
    logger.info("Checkpoint written", path=path, chain=state.chain_id, iteration=state.iteration)


def load_checkpoint(path: str) -> Tuple[ChainState, int]:
    """Returns (state, seed)"""
    from jobpower.services.trace_io import read_json

    return ChainState.from_dict(read_json(path))


def initialize_chain(
    corpus: Sequence[JobSeries],
    hypers: HyperPriors,
    config: McmcConfig,
    chain_id: int = 0,
    fixed_parent: Optional[ParentParams] = None,
    stream_label: str = "mcmc",
) -> ChainState:
    """Start a chain from prior draws: parent from the hyperpriors, jobs from that parent"""
    rng = stream(config.seed, stream_label, "init", chain_id)
    parent = fixed_parent.copy() if fixed_parent is not None else sample_parent_from_hyperpriors(hypers, rng)
    jobs = [
        sample_job_from_parent(parent, rng, hypers.n_regimes, length=s.length, n_replicates=s.n_cages)
        for s in corpus
    ]
    observations = [np.array(s.watts, dtype=float) for s in corpus]
    return ChainState(
        chain_id=chain_id,
        iteration=0,
        job_ids=[s.job_id for s in corpus],
        parent=parent,
        jobs=jobs,
        observations=observations,
    )


def _check_finite(state: ChainState) -> None:
    values = list(state.parent.scalars().values())
    values += [state.parent.u, state.parent.nu, state.parent.varsigma2]
    for job in state.jobs:
        values += [job.lam, job.v, job.mu, job.z, job.sigma2, job.rho]
    for value in values:
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite value entered chain {state.chain_id} at iteration {state.iteration}")


def _acceptance(counts: MhCounts) -> Dict[str, float]:
    return {step: (acc / n if n else 0.0) for step, (n, acc) in sorted(counts.items())}


@monitor_performance
def run_mcmc(
    corpus: Sequence[JobSeries],
    hypers: HyperPriors,
    config: McmcConfig,
    chain_id: int = 0,
    threads: Optional[int] = None,
    fixed_parent: Optional[ParentParams] = None,
    resume_from: Optional[ChainState] = None,
    checkpoint_path: Optional[str] = None,
    stream_label: str = "mcmc",
) -> ChainResult:
    """
    Run one chain for ``config.n_iterations`` iterations.

    Args:
        corpus: observed jobs
        hypers: hyperpriors (also fixes K)
        config: iterations, burn-in, thinning and proposal scales
        chain_id: labels the chain's random streams
        threads: workers for the step (i) job sweep
        fixed_parent: when given, step (ii) is skipped and the parent stays fixed
        resume_from: continue a checkpointed state instead of initializing
        checkpoint_path: where periodic checkpoints are written
        stream_label: namespace of the random streams

    Returns:
        ChainResult with post-burn-in samples
    """
    if not corpus:
        raise DomainError("run_mcmc needs at least one job")

    state = resume_from or initialize_chain(corpus, hypers, config, chain_id, fixed_parent, stream_label)
    if len(state.jobs) != len(corpus):
        raise DomainError("checkpoint does not match the corpus")
    workers = max(1, min(threads or settings.THREADS, len(corpus)))

    logger.info("Starting chain",
                chain=chain_id,
                jobs=len(corpus),
                start=state.iteration,
                iterations=config.n_iterations,
                workers=workers)

    def sweep_job(index: int, iteration: int) -> MhCounts:
        rng = stream(config.seed, stream_label, chain_id, index, iteration)
        try:
            x, counts = update_job_state(
                corpus[index], state.jobs[index], state.observations[index], state.parent, config, rng
            )
        except SamplerError:
            raise
        except (JobPowerException, ArithmeticError, ValueError, np.linalg.LinAlgError) as e:
            raise SamplerError(str(e), corpus[index].job_id, iteration) from e
        state.observations[index] = x
        return counts

    with ThreadPoolExecutor(max_workers=workers) as executor:
        for iteration in range(state.iteration, config.n_iterations):
            if workers > 1:
                job_counts = list(executor.map(lambda i: sweep_job(i, iteration), range(len(corpus))))
            else:
                job_counts = [sweep_job(i, iteration) for i in range(len(corpus))]
            for counts in job_counts:
                for step, (n, acc) in counts.items():
                    _count_many(state.mh_counts, step, n, acc)

            if fixed_parent is None:
                rng = stream(config.seed, stream_label, chain_id, "parent", iteration)
                state.parent, counts = update_parent(state.jobs, state.observations, state.parent, hypers, rng, config)
                for step, (n, acc) in counts.items():
                    _count_many(state.mh_counts, step, n, acc)
            state.iteration = iteration + 1

            if settings.DEBUG:
                _check_finite(state)

            if iteration >= config.burn_in and (iteration - config.burn_in) % config.thin == 0:
                state.samples.append(PosteriorSample(
                    iteration=iteration,
                    jobs=[j.copy() if config.keep_paths else j.tail(1) for j in state.jobs],
                    parent=state.parent.copy(),
                ))

            if state.iteration % config.progress_every == 0:
                logger.info("Chain progress",
                            chain=chain_id,
                            iteration=state.iteration,
                            tau2=round(state.parent.tau2, 4))

            if checkpoint_path and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state, config.seed)

    monitor.merge_mh(state.mh_counts)
    acceptance = _acceptance(state.mh_counts)
    logger.info("Chain finished", chain=chain_id, samples=len(state.samples), acceptance=acceptance)
    return ChainResult(
        chain_id=chain_id,
        job_ids=list(state.job_ids),
        samples=list(state.samples),
        acceptance=acceptance,
        state=state,
    )


def _count_many(counts: MhCounts, step: str, n: int, acc: int) -> None:
    entry = counts.setdefault(step, [0, 0])
    entry[0] += n
    entry[1] += acc


def run_chains(
    corpus: Sequence[JobSeries],
    hypers: HyperPriors,
    config: McmcConfig,
    threads: Optional[int] = None,
    resume_from: Optional[Sequence[Optional[ChainState]]] = None,
    checkpoint_paths: Optional[Sequence[Optional[str]]] = None,
) -> List[ChainResult]:
    """
    Run ``config.n_chains`` independent chains concurrently.

    The worker budget is split between chains first; whatever is left over
    goes to each chain's job sweep. Results are in chain order and do not
    depend on the split.
    """
    n_chains = config.n_chains
    resume_from = list(resume_from) if resume_from is not None else [None] * n_chains
    checkpoint_paths = list(checkpoint_paths) if checkpoint_paths is not None else [None] * n_chains
    if len(resume_from) != n_chains or len(checkpoint_paths) != n_chains:
        raise DomainError("resume states and checkpoint paths need one entry per chain")

    workers = max(1, threads or settings.THREADS)
    chain_workers = min(workers, n_chains)
    sweep_workers = max(1, workers // chain_workers)

    def one(chain_id: int) -> ChainResult:
        return run_mcmc(corpus, hypers, config, chain_id=chain_id, threads=sweep_workers,
                        resume_from=resume_from[chain_id], checkpoint_path=checkpoint_paths[chain_id])

    if chain_workers == 1:
        return [one(c) for c in range(n_chains)]
    with ThreadPoolExecutor(max_workers=chain_workers) as executor:
        return list(executor.map(one, range(n_chains)))


def potential_scale_reduction(chains: Sequence[ChainResult]) -> Dict[str, float]:
    """R-hat of every parent scalar across chains"""
    import arviz as az

    draws = min(len(c.samples) for c in chains)
    if len(chains) < 2 or draws < 4:
        raise DomainError("R-hat needs at least two chains with four stored samples each")
    posterior = {
        name: np.stack([c.parent_trace(name)[:draws] for c in chains])
        for name in ParentParams.SCALARS
    }
    rhat = az.rhat(az.convert_to_dataset(posterior))
    return {name: float(rhat[name].values) for name in ParentParams.SCALARS}
