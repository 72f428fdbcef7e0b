"""
Pragmatic estimator: per-job mixture clustering and maximum likelihood, with
the training collection itself serving as an empirical parent.

A new job is updated by reweighting the collection with each entry's
likelihood of the job's history.
"""

import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import structlog
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import norm
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from jobpower.config.run_config import PragmaticConfig
from jobpower.services.core_model import (
    JobSeries,
    SeedLike,
    as_generator,
    categorical,
    log_stationary_from_rates,
    simulate_forward,
    transition_matrix,
)
from jobpower.services.job_predictor import PredictiveEnsemble
from jobpower.services.trace_io import read_json, write_json
from jobpower.utils.exceptions import DataFormatError, DomainError
from jobpower.utils.monitoring import monitor_performance

logger = structlog.get_logger(__name__)

RATE_FLOOR = 1e-6
PRAGMATIC_POSTERIOR_SCHEMA = "jobpower.pragmatic_posterior/1"


@dataclass
class PragmaticJobEstimate:
    """Point estimates for one training job; regimes sorted by mean"""

    job_id: str
    means: np.ndarray
    lam: np.ndarray
    pi: np.ndarray
    sigma2: float
    rho: float
    tau2: float
    labels: Optional[np.ndarray] = None

    @property
    def n_regimes(self) -> int:
        return self.means.size

    def to_dict(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "means": self.means.tolist(),
            "lam": self.lam.tolist(),
            "pi": self.pi.tolist(),
            "sigma2": float(self.sigma2),
            "rho": float(self.rho),
            "tau2": float(self.tau2),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PragmaticJobEstimate":
        try:
            return cls(
                job_id=str(data["job_id"]),
                means=np.array(data["means"], dtype=float),
                lam=np.array(data["lam"], dtype=float),
                pi=np.array(data["pi"], dtype=float),
                sigma2=float(data["sigma2"]),
                rho=float(data["rho"]),
                tau2=float(data["tau2"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed pragmatic estimate: {e}") from e


@dataclass
class EmpiricalParent:
    """Uniform empirical distribution over the fitted training jobs"""

    estimates: List[PragmaticJobEstimate]

    def __post_init__(self):
        if not self.estimates:
            raise DomainError("an empirical parent needs at least one estimate")

    def __len__(self) -> int:
        return len(self.estimates)

    def save(self, path: str) -> None:
        write_json(path, [e.to_dict() for e in self.estimates])

    @classmethod
    def load(cls, path: str) -> "EmpiricalParent":
        data = read_json(path)
        if not isinstance(data, list):
            raise DataFormatError(f"{path}: expected a JSON array of estimates")
        return cls([PragmaticJobEstimate.from_dict(item) for item in data])


@dataclass
class PragmaticPosterior:
    """Weights over parent entries, with each entry's filtered regime law at the end of the history"""

    weights: np.ndarray
    final_probs: List[np.ndarray] = field(default_factory=list)
    last_value: Optional[float] = None
    job_id: str = "job"
    n_cages: int = 1
    next_minute: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": PRAGMATIC_POSTERIOR_SCHEMA,
            "job_id": self.job_id,
            "n_cages": self.n_cages,
            "next_minute": self.next_minute,
            "weights": self.weights.tolist(),
            "final_probs": [p.tolist() for p in self.final_probs],
            "last_value": self.last_value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PragmaticPosterior":
        if data.get("schema") != PRAGMATIC_POSTERIOR_SCHEMA:
            raise DataFormatError(f"Unsupported pragmatic posterior schema: {data.get('schema')}")
        try:
            return cls(
                weights=np.array(data["weights"], dtype=float),
                final_probs=[np.array(p, dtype=float) for p in data["final_probs"]],
                last_value=None if data["last_value"] is None else float(data["last_value"]),
                job_id=str(data["job_id"]),
                n_cages=int(data["n_cages"]),
                next_minute=int(data["next_minute"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed pragmatic posterior: {e}") from e


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _kalman_loglik(r: np.ndarray, sigma2: float, rho: float, tau2: float) -> float:
    """Exact log-likelihood of rows of AR(1) + white noise via a scalar Kalman filter"""
    a = np.exp(-rho)
    q = sigma2 * -np.expm1(-2.0 * rho)
    n_rows, length = r.shape
    m = np.zeros(n_rows)
    p = np.full(n_rows, sigma2)
    total = 0.0
    for t in range(length):
        if t > 0:
            m = a * m
            p = a * a * p + q
        s = p + tau2
        v = r[:, t] - m
        total += float(np.sum(-0.5 * (np.log(2.0 * np.pi * s) + v * v / s)))
        gain = p / s
        m = m + gain * v
        p = (1.0 - gain) * p
    return total


def ar1_noise_mle(residuals: np.ndarray) -> Dict[str, float]:
    """
    Maximum likelihood (sigma2, rho, tau2) for residual rows modeled as a
    stationary AR(1) plus white noise.
    """
    r = np.atleast_2d(np.asarray(residuals, dtype=float))
    var = float(np.var(r)) or 1.0
    if r.shape[1] > 2:
        centered = r - r.mean(axis=1, keepdims=True)
        acf1 = float(np.sum(centered[:, 1:] * centered[:, :-1]) / max(np.sum(centered * centered), 1e-300))
    else:
        acf1 = 0.5
    a0 = min(max(acf1, 0.05), 0.95)
    x0 = np.log([0.8 * var, -np.log(a0), 0.2 * var])
    bounds = [
        (np.log(1e-8 * var), np.log(1e3 * var)),
        (np.log(1e-4), np.log(20.0)),
        (np.log(1e-8 * var), np.log(1e3 * var)),
    ]

    def objective(theta: np.ndarray) -> float:
        s2, rho, t2 = np.exp(theta)
        value = -_kalman_loglik(r, s2, rho, t2)
        return value if np.isfinite(value) else 1e300

    result = minimize(objective, x0, method="L-BFGS-B", bounds=bounds)
    sigma2, rho, tau2 = np.exp(result.x)
    return {"sigma2": float(sigma2), "rho": float(rho), "tau2": float(tau2), "loglik": float(-result.fun)}


def transition_mle(labels: np.ndarray, n_regimes: int):
    """
    Rates and landing probabilities from hard labels.

    pi is proportional to the number of entries into each regime; lam_k
    matches the observed exit rate, lam_k (1 - pi_k) = exits_k / N_k.
    """
    labels = np.atleast_2d(labels)
    if n_regimes == 1:
        return np.array([0.5]), np.array([1.0])
    prev, nxt = labels[:, :-1].ravel(), labels[:, 1:].ravel()
    moved = prev != nxt
    entries = np.bincount(nxt[moved], minlength=n_regimes).astype(float)
    exits = np.bincount(prev[moved], minlength=n_regimes).astype(float)
    occupancy = np.bincount(prev, minlength=n_regimes).astype(float)

    pi = entries / entries.sum() if entries.sum() > 0 else np.full(n_regimes, 1.0 / n_regimes)
    exit_rate = np.divide(exits, occupancy, out=np.zeros(n_regimes), where=occupancy > 0)
    stay_share = 1.0 - pi
    lam = np.divide(exit_rate, stay_share, out=exit_rate.copy(), where=stay_share > 0)
    return np.clip(lam, RATE_FLOOR, 1.0 - RATE_FLOOR), pi


def _select_mixture(values: np.ndarray, config: PragmaticConfig, seed: int, job_id: str):
    best, best_bic = None, np.inf
    max_k = min(config.max_components, np.unique(values).size)
    for k in range(1, max_k + 1):
        gm = GaussianMixture(n_components=k, n_init=config.em_restarts, random_state=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            gm.fit(values)
        if not gm.converged_:
            continue
        bic = gm.bic(values)
        if bic < best_bic:
            best, best_bic = gm, bic
    if best is None:
        logger.warning("Mixture EM did not converge, using one regime", job_id=job_id)
    return best


@monitor_performance
def fit_job_pragmatic(
    job: JobSeries,
    config: Optional[PragmaticConfig] = None,
    seed: int = 0,
) -> PragmaticJobEstimate:
    """
    Cluster a job's readings with a BIC-selected normal mixture, label each
    minute by its most likely component, and fit transitions and the AR(1)
    residual by maximum likelihood.
    """
    config = config or PragmaticConfig()
    values = job.watts.reshape(-1, 1)
    if job.length < config.min_samples:
        raise DomainError(f"job {job.job_id}: pragmatic fit needs at least {config.min_samples} minutes")

    gm = _select_mixture(values, config, seed, job.job_id)
    if gm is None:
        raw = np.zeros(job.watts.shape, dtype=int)
        centers = np.array([float(values.mean())])
    else:
        raw = gm.predict(values).reshape(job.watts.shape)
        centers = gm.means_.ravel()

    # keep used components only, relabelled by increasing mean
    used = np.unique(raw)
    order = used[np.argsort(centers[used])]
    relabel = np.empty(centers.size, dtype=int)
    relabel[order] = np.arange(order.size)
    labels = relabel[raw]
    k = order.size
    means = np.array([job.watts[labels == i].mean() for i in range(k)])

    lam, pi = transition_mle(labels, k)
    fit = ar1_noise_mle(job.watts - means[labels])
    logger.debug("Pragmatic fit", job_id=job.job_id, regimes=k, **{n: round(v, 4) for n, v in fit.items()})
    return PragmaticJobEstimate(
        job_id=job.job_id, means=means, lam=lam, pi=pi,
        sigma2=fit["sigma2"], rho=fit["rho"], tau2=fit["tau2"], labels=labels,
    )


def fit_empirical_parent(
    corpus: Sequence[JobSeries],
    config: Optional[PragmaticConfig] = None,
    seed: int = 0,
) -> EmpiricalParent:
    return EmpiricalParent([fit_job_pragmatic(job, config, seed) for job in corpus])


# ---------------------------------------------------------------------------
# Updating and prediction
# ---------------------------------------------------------------------------

def history_log_likelihood(history: JobSeries, est: PragmaticJobEstimate, independent: bool = False):
    """
    Forward-algorithm log-likelihood of a history under one estimate.

    The AR(1) residual is tracked by a scalar Kalman filter per current
    regime, so within a regime run the likelihood is the exact innovations
    decomposition (a single-regime estimate reproduces ``_kalman_loglik``).
    At each minute the filters arriving from the previous regimes are
    merged by moment matching. Censored readings contribute the normal
    survival function at the cap and leave the residual filter at its
    prediction. With ``independent``, readings use the marginal
    N(mu_k, sigma2 + tau2).

    Returns:
        (log-likelihood, filtered regime probabilities at the last minute of
        the first cage)
    """
    k = est.n_regimes
    mu = est.means
    a = np.exp(-est.rho)
    q = est.sigma2 * -np.expm1(-2.0 * est.rho)
    tau2 = est.tau2
    with np.errstate(divide="ignore"):
        log_tpm = np.log(transition_matrix(est.lam, est.pi))
    log_s0 = log_stationary_from_rates(est.lam, est.pi)

    total = 0.0
    final = None
    for r in range(history.n_cages):
        x, caps = history.watts[r], history.caps[r]
        log_alpha = None
        m = np.zeros(k)
        p = np.full(k, est.sigma2)
        for t in range(history.length):
            if log_alpha is None:
                # rows index the previous regime; the first minute has one
                log_w = log_s0[None, :]
                m_pred, p_pred = np.zeros(1), np.full(1, est.sigma2)
            else:
                log_w = log_alpha[:, None] + log_tpm
                m_pred, p_pred = a * m, a * a * p + q
            s = p_pred + tau2
            mean = mu[None, :] + m_pred[:, None]
            censored = not np.isnan(caps[t])
            if censored:
                log_e = norm.logsf(caps[t], loc=mean, scale=np.sqrt(s)[:, None])
            else:
                log_e = -0.5 * (np.log(2.0 * np.pi * s)[:, None] + (x[t] - mean) ** 2 / s[:, None])
            log_joint = log_w + log_e
            log_alpha = logsumexp(log_joint, axis=0)

            if independent:
                m, p = np.zeros(k), np.full(k, est.sigma2)
                continue
            if censored:
                m_upd = np.broadcast_to(m_pred[:, None], log_joint.shape)
                p_upd = p_pred
            else:
                gain = p_pred / s
                m_upd = m_pred[:, None] + gain[:, None] * (x[t] - mean)
                p_upd = p_pred * tau2 / s
            with np.errstate(invalid="ignore"):
                w = np.exp(log_joint - log_alpha[None, :])
            w = np.nan_to_num(w)
            mass = w.sum(axis=0)
            reachable = mass > 0
            safe = np.where(reachable, mass, 1.0)
            m = np.where(reachable, np.sum(w * m_upd, axis=0) / safe, 0.0)
            spread = p_upd[:, None] + (m_upd - m[None, :]) ** 2
            p = np.where(reachable, np.sum(w * spread, axis=0) / safe, est.sigma2)
        if log_alpha is not None:
            norm_const = logsumexp(log_alpha)
            total += float(norm_const)
            if final is None:
                final = np.exp(log_alpha - norm_const)
    if final is None:
        final = np.exp(log_s0)
    return total, final


@monitor_performance
def update_job_pragmatic(
    history: JobSeries,
    parent: EmpiricalParent,
    independent: bool = False,
) -> PragmaticPosterior:
    """Posterior weights over parent entries, proportional to each entry's likelihood of the history"""
    meta = {"job_id": history.job_id, "n_cages": history.n_cages,
            "next_minute": history.start_minute + history.length}
    finals = []
    if history.length == 0:
        weights = np.full(len(parent), 1.0 / len(parent))
        finals = [np.exp(log_stationary_from_rates(e.lam, e.pi)) for e in parent.estimates]
        return PragmaticPosterior(weights, finals, None, **meta)

    logliks = np.empty(len(parent))
    for i, est in enumerate(parent.estimates):
        logliks[i], final = history_log_likelihood(history, est, independent)
        finals.append(final)
    weights = np.exp(logliks - logsumexp(logliks))
    last = None if history.censored[0, -1] else float(history.watts[0, -1])
    return PragmaticPosterior(weights / weights.sum(), finals, last, **meta)


def predict_pragmatic(
    posterior: PragmaticPosterior,
    parent: EmpiricalParent,
    horizon: int,
    realizations: int = 1000,
    n_cages: int = 1,
    seed: SeedLike = 0,
    job_id: str = "job",
    start_minute: int = 0,
) -> PredictiveEnsemble:
    """
    Simulate futures by drawing one parent entry per realization, starting
    its regime from the entry's filtered law and its residual from the last
    reading, then running the forward model.
    """
    if horizon < 1 or realizations < 1:
        raise DomainError("horizon and realizations must be at least 1")
    rng = as_generator(seed, "predict_pragmatic", job_id)
    entries = categorical(rng, np.tile(posterior.weights, (realizations, 1)))

    k_max = max(e.n_regimes for e in parent.estimates)
    lam = np.full((realizations, k_max), 0.5)
    pi = np.zeros((realizations, k_max))
    mu = np.zeros((realizations, k_max))
    start_probs = np.zeros((realizations, k_max))
    sigma2 = np.empty(realizations)
    rho = np.empty(realizations)
    tau2 = np.empty(realizations)
    for r, j in enumerate(entries):
        est = parent.estimates[j]
        k = est.n_regimes
        lam[r, :k], pi[r, :k], mu[r, :k] = est.lam, est.pi, est.means
        start_probs[r, :k] = posterior.final_probs[j]
        sigma2[r], rho[r], tau2[r] = est.sigma2, est.rho, est.tau2

    xi0 = categorical(rng, start_probs)
    if posterior.last_value is None:
        z0 = np.sqrt(sigma2) * rng.standard_normal(realizations)
    else:
        shrink = sigma2 / (sigma2 + tau2)
        resid = posterior.last_value - mu[np.arange(realizations), xi0]
        z0 = shrink * resid + np.sqrt(shrink * tau2) * rng.standard_normal(realizations)

    _, _, _, x = simulate_forward(lam, pi, mu, sigma2, rho, tau2, xi0, z0, horizon, rng)
    return PredictiveEnsemble(job_id, np.maximum(x, 0.0), n_cages=n_cages, start_minute=start_minute)
