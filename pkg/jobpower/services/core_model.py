"""
Core model: job power series, job and parent parameters, and the forward
generative model.

A job's cage-level power at minute t is

    x(t) = mu[xi(t)] + z(t) + eps(t)

where xi is a sticky Markov regime chain, z a stationary AR(1) residual
(the discrete-time O-U process) and eps white observation noise. Regime
labels are 0-based.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import structlog

from jobpower.config.run_config import HyperPriors
from jobpower.utils.exceptions import DataFormatError, DomainError
from jobpower.utils.rng import stream

logger = structlog.get_logger(__name__)

FRACTION_EPS = 1e-12

SeedLike = Union[int, np.random.Generator]


def as_generator(seed: SeedLike, *labels) -> np.random.Generator:
    """Pass generators through; expand integer seeds into a labeled stream"""
    if isinstance(seed, np.random.Generator):
        return seed
    return stream(int(seed), *labels)


def clip_fraction(values):
    return np.clip(values, FRACTION_EPS, 1.0 - FRACTION_EPS)


def inverse_gamma(rng: np.random.Generator, shape, rate, size=None):
    """Draw from IG(shape, rate), parameterized so the mean is rate/(shape-1)"""
    return rate / rng.gamma(shape, 1.0, size=size)


# ---------------------------------------------------------------------------
# Stick breaking and transition structure
# ---------------------------------------------------------------------------

def stick_break(fractions) -> np.ndarray:
    """
    Turn stick fractions f_1..f_{n} into n+1 weights.

    w_m = f_m * prod_{l<m}(1 - f_l); the last weight takes the remainder so the
    vector sums to one exactly.
    """
    f = np.asarray(fractions, dtype=float)
    if f.ndim != 1 or f.size == 0:
        raise DomainError("stick_break needs a nonempty 1-D list of fractions")
    if np.any(~np.isfinite(f)) or np.any(f <= 0.0) or np.any(f >= 1.0):
        raise DomainError("stick fractions must lie strictly inside (0, 1)")

    remaining = np.concatenate(([1.0], np.cumprod(1.0 - f)))
    weights = np.empty(f.size + 1)
    weights[:-1] = f * remaining[:-1]
    weights[-1] = 1.0 - weights[:-1].sum()
    return weights


def inverse_stick_break(weights) -> np.ndarray:
    """Fractions f_1..f_{n-1} whose stick_break reproduces ``weights``"""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise DomainError("inverse_stick_break needs at least two weights")
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-8):
        raise DomainError("weights must be a probability vector")

    used = np.concatenate(([0.0], np.cumsum(w[:-2])))
    remaining = np.maximum(1.0 - used, FRACTION_EPS)
    return clip_fraction(w[:-1] / remaining)


def pi_from_v(v) -> np.ndarray:
    """Regime landing probabilities from K stick fractions (the last one is unused)"""
    if len(v) == 1:
        return np.ones(1)
    return stick_break(v[:-1])


def transition_matrix(lam, pi) -> np.ndarray:
    """P[k, l] = lam_k * pi_l, with 1 - lam_k added to the diagonal"""
    lam = np.asarray(lam, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if lam.shape != pi.shape or lam.ndim != 1:
        raise DomainError("lam and pi must be vectors of equal length")
    if np.any(lam < 0) or np.any(lam > 1):
        raise DomainError("transition rates must lie in [0, 1]")

    tpm = lam[:, None] * pi[None, :]
    tpm[np.diag_indices_from(tpm)] += 1.0 - lam
    return tpm


def stationary_distribution(tpm) -> np.ndarray:
    """Stationary vector s with s P = s and sum(s) = 1 (least squares)"""
    tpm = np.asarray(tpm, dtype=float)
    k = tpm.shape[0]
    system = np.vstack([tpm.T - np.eye(k), np.ones((1, k))])
    rhs = np.zeros(k + 1)
    rhs[-1] = 1.0
    s, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    s = np.clip(s, 0.0, None)
    return s / s.sum()


def log_stationary_from_rates(lam, pi) -> np.ndarray:
    """Log stationary distribution of the sticky TPM: s_l proportional to pi_l / lam_l"""
    log_s = np.log(np.maximum(pi, 1e-300)) - np.log(lam)
    log_s -= log_s.max()
    return log_s - np.log(np.exp(log_s).sum())


# ---------------------------------------------------------------------------
# Data and parameter types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerSample:
    """One cage-level reading on the 1-minute grid"""

    minute_index: int
    watts: float
    censored_at: Optional[float] = None

    def __post_init__(self):
        if self.minute_index < 0:
            raise DomainError("minute_index must be nonnegative")
        if not np.isfinite(self.watts) or self.watts < 0:
            raise DomainError(f"watts must be a nonnegative number, got {self.watts}")
        if self.censored_at is not None and self.watts != self.censored_at:
            raise DomainError("a censored sample must record watts equal to its cap")


@dataclass(frozen=True)
class JobSeries:
    """
    Observed power of one job: one row per cage (replicate), one column per minute.

    ``caps`` holds the censoring cap per sample and NaN where the reading is exact.
    """

    job_id: str
    watts: np.ndarray
    caps: Optional[np.ndarray] = None
    start_minute: int = 0

    def __post_init__(self):
        watts = np.array(self.watts, dtype=float)
        if watts.ndim == 1:
            watts = watts.reshape(1, -1)
        if watts.ndim != 2 or watts.shape[0] < 1:
            raise DataFormatError(f"job {self.job_id}: power must be a (cages, minutes) array")
        if np.any(~np.isfinite(watts)) or np.any(watts < 0):
            raise DataFormatError(f"job {self.job_id}: watts must be finite and nonnegative")

        if self.caps is None:
            caps = np.full(watts.shape, np.nan)
        else:
            caps = np.array(self.caps, dtype=float).reshape(watts.shape)
            censored = ~np.isnan(caps)
            if np.any(watts[censored] != caps[censored]):
                raise DataFormatError(f"job {self.job_id}: censored readings must equal their cap")

        watts.setflags(write=False)
        caps.setflags(write=False)
        object.__setattr__(self, "watts", watts)
        object.__setattr__(self, "caps", caps)

    @classmethod
    def from_samples(cls, job_id: str, replicates: List[List[PowerSample]]) -> "JobSeries":
        if not replicates:
            raise DataFormatError(f"job {job_id}: no replicates")
        length = len(replicates[0])
        grid = [s.minute_index for s in replicates[0]]
        for rep in replicates:
            if len(rep) != length or [s.minute_index for s in rep] != grid:
                raise DataFormatError(f"job {job_id}: replicates must share one minute grid")
        if grid and grid != list(range(grid[0], grid[0] + length)):
            raise DataFormatError(f"job {job_id}: minutes must be contiguous")

        watts = np.array([[s.watts for s in rep] for rep in replicates], dtype=float).reshape(len(replicates), length)
        caps = np.array(
            [[np.nan if s.censored_at is None else s.censored_at for s in rep] for rep in replicates],
            dtype=float,
        ).reshape(len(replicates), length)
        return cls(job_id, watts, caps, start_minute=grid[0] if grid else 0)

    @classmethod
    def empty(cls, job_id: str, n_cages: int = 1) -> "JobSeries":
        return cls(job_id, np.zeros((n_cages, 0)))

    @property
    def n_cages(self) -> int:
        return self.watts.shape[0]

    @property
    def length(self) -> int:
        return self.watts.shape[1]

    @property
    def censored(self) -> np.ndarray:
        return ~np.isnan(self.caps)

    @property
    def has_censoring(self) -> bool:
        return bool(self.censored.any())

    def replicates(self) -> List[List[PowerSample]]:
        out = []
        for r in range(self.n_cages):
            out.append([
                PowerSample(
                    self.start_minute + t,
                    float(self.watts[r, t]),
                    None if np.isnan(self.caps[r, t]) else float(self.caps[r, t]),
                )
                for t in range(self.length)
            ])
        return out

    def window(self, start: int, stop: int) -> "JobSeries":
        """Minutes [start, stop) relative to the first reading"""
        start = max(0, start)
        stop = min(self.length, max(start, stop))
        return JobSeries(
            self.job_id,
            self.watts[:, start:stop],
            self.caps[:, start:stop],
            start_minute=self.start_minute + start,
        )

    def head(self, n: int) -> "JobSeries":
        return self.window(0, n)

    def censor_at(self, cap: float) -> "JobSeries":
        """Apply a power cap: readings at or above it become right-censored"""
        hit = self.watts >= cap
        watts = np.where(hit, cap, self.watts)
        caps = np.where(hit, cap, self.caps)
        return JobSeries(self.job_id, watts, caps, start_minute=self.start_minute)

    def censor_at_quantile(self, q: float) -> "JobSeries":
        if self.length == 0:
            return self
        return self.censor_at(float(np.quantile(self.watts, q)))


@dataclass
class JobParams:
    """
    Job-specific latent state.

    Path arrays (xi, phi, z) have shape (replicates, minutes); vectors over
    regimes have length K. ``pi`` uses the first K-1 stick fractions.
    """

    xi: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    psi: np.ndarray
    z: np.ndarray
    sigma2: float
    rho: float

    @property
    def n_regimes(self) -> int:
        return self.lam.size

    @property
    def pi(self) -> np.ndarray:
        return pi_from_v(self.v)

    @property
    def tpm(self) -> np.ndarray:
        return transition_matrix(self.lam, self.pi)

    @property
    def length(self) -> int:
        return self.xi.shape[1]

    def validate(self) -> None:
        if np.any(self.lam <= 0) or np.any(self.lam >= 1):
            raise DomainError("lam must lie in (0, 1)")
        if np.any(self.v <= 0) or np.any(self.v >= 1):
            raise DomainError("v must lie in (0, 1)")
        if not self.sigma2 > 0 or not self.rho > 0:
            raise DomainError("sigma2 and rho must be positive")
        if self.xi.shape != self.z.shape or self.xi.shape != self.phi.shape:
            raise DomainError("xi, phi and z must share one shape")

    def copy(self) -> "JobParams":
        return JobParams(
            xi=self.xi.copy(), phi=self.phi.copy(), lam=self.lam.copy(), v=self.v.copy(),
            mu=self.mu.copy(), psi=self.psi.copy(), z=self.z.copy(),
            sigma2=float(self.sigma2), rho=float(self.rho),
        )

    def tail(self, keep: int = 1) -> "JobParams":
        """Copy keeping only the last ``keep`` minutes of the paths"""
        trimmed = self.copy()
        if self.length > keep:
            trimmed.xi = self.xi[:, -keep:].copy()
            trimmed.phi = self.phi[:, -keep:].copy()
            trimmed.z = self.z[:, -keep:].copy()
        return trimmed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "xi": self.xi.tolist(),
            "phi": self.phi.astype(int).tolist(),
            "lam": self.lam.tolist(),
            "v": self.v.tolist(),
            "mu": self.mu.tolist(),
            "psi": self.psi.tolist(),
            "z": self.z.tolist(),
            "sigma2": float(self.sigma2),
            "rho": float(self.rho),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "JobParams":
        try:
            xi = np.array(data["xi"], dtype=int)
            n_rep = xi.shape[0] if xi.ndim == 2 else 1
            return cls(
                xi=xi.reshape(n_rep, -1),
                phi=np.array(data["phi"], dtype=bool).reshape(n_rep, -1),
                lam=np.array(data["lam"], dtype=float),
                v=np.array(data["v"], dtype=float),
                mu=np.array(data["mu"], dtype=float),
                psi=np.array(data["psi"], dtype=int),
                z=np.array(data["z"], dtype=float).reshape(n_rep, -1),
                sigma2=float(data["sigma2"]),
                rho=float(data["rho"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed job parameters: {e}") from e


@dataclass
class ParentParams:
    """Parameters of the parent distribution shared by all jobs"""

    mu_sigma: float
    sigma2_sigma: float
    mu_rho: float
    sigma2_rho: float
    u: np.ndarray
    nu: np.ndarray
    varsigma2: np.ndarray
    alpha_lambda: float
    beta_lambda: float
    gamma: float
    delta: float
    tau2: float

    SCALARS = (
        "mu_sigma", "sigma2_sigma", "mu_rho", "sigma2_rho",
        "alpha_lambda", "beta_lambda", "gamma", "delta", "tau2",
    )

    @property
    def n_components(self) -> int:
        return self.nu.size

    @property
    def omega(self) -> np.ndarray:
        return stick_break(self.u[:-1])

    def validate(self) -> None:
        for name in ("sigma2_sigma", "sigma2_rho", "alpha_lambda", "beta_lambda", "gamma", "delta", "tau2"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if np.any(self.varsigma2 <= 0):
            raise DomainError("mixture variances must be positive")
        if not (self.u.size == self.nu.size == self.varsigma2.size):
            raise DomainError("u, nu and varsigma2 must have one entry per component")

    def copy(self) -> "ParentParams":
        values = {name: float(getattr(self, name)) for name in self.SCALARS}
        return ParentParams(u=self.u.copy(), nu=self.nu.copy(), varsigma2=self.varsigma2.copy(), **values)

    def scalars(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in self.SCALARS}

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = self.scalars()
        data.update({"u": self.u.tolist(), "nu": self.nu.tolist(), "varsigma2": self.varsigma2.tolist()})
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ParentParams":
        try:
            parent = cls(
                u=np.array(data["u"], dtype=float),
                nu=np.array(data["nu"], dtype=float),
                varsigma2=np.array(data["varsigma2"], dtype=float),
                **{name: float(data[name]) for name in cls.SCALARS},
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed parent parameters: {e}") from e
        parent.validate()
        return parent


# ---------------------------------------------------------------------------
# Forward simulation
# ---------------------------------------------------------------------------

def categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs``"""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cum[..., -1]
    return np.minimum((u[..., None] > cum).sum(axis=-1), probs.shape[-1] - 1)


def simulate_forward(
    lam,
    pi,
    mu,
    sigma2,
    rho,
    tau2,
    xi0,
    z0,
    horizon: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Continue R paths ``horizon`` minutes past the current state (xi0, z0).

    Regime moves use the two-stage form of the TPM: a possible transition
    happens with probability lam[xi] and then lands on a pi-draw (possibly
    the same regime). z follows the AR(1) kernel with coefficient exp(-rho)
    and marginal variance sigma2.

    Per-path parameters may be given as arrays with a leading R axis.

    Returns:
        (xi, phi, z, x), each of shape (R, horizon)
    """
    xi = np.atleast_1d(np.asarray(xi0, dtype=int)).copy()
    n_paths = xi.size
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (n_paths, np.shape(lam)[-1]))
    k = lam.shape[1]
    pi = np.broadcast_to(np.asarray(pi, dtype=float), (n_paths, k))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (n_paths, k))
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (n_paths,))
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (n_paths,))
    tau = np.sqrt(np.broadcast_to(np.asarray(tau2, dtype=float), (n_paths,)))
    z = np.broadcast_to(np.asarray(z0, dtype=float), (n_paths,)).copy()

    a = np.exp(-rho)
    innovation_sd = np.sqrt(sigma2 * -np.expm1(-2.0 * rho))
    rows = np.arange(n_paths)

    out_xi = np.empty((n_paths, horizon), dtype=int)
    out_phi = np.empty((n_paths, horizon), dtype=bool)
    out_z = np.empty((n_paths, horizon))
    for t in range(horizon):
        possible = rng.random(n_paths) < lam[rows, xi]
        landing = categorical(rng, pi)
        xi = np.where(possible, landing, xi)
        z = a * z + innovation_sd * rng.standard_normal(n_paths)
        out_xi[:, t] = xi
        out_phi[:, t] = possible
        out_z[:, t] = z

    eps = tau[:, None] * rng.standard_normal((n_paths, horizon))
    x = mu[rows[:, None], out_xi] + out_z + eps
    return out_xi, out_phi, out_z, x


def simulate_paths(
    params: JobParams,
    tau2: float,
    length: int,
    n_replicates: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Simulate latent and observed paths from the start of a job.

    xi(0) follows the stationary distribution of the TPM, phi(0) is 0 and
    z(0) is drawn from N(0, sigma2).
    """
    if length < 1:
        raise DomainError("length must be at least 1")
    pi = params.pi
    s0 = stationary_distribution(transition_matrix(params.lam, pi))
    xi0 = categorical(rng, np.tile(s0, (n_replicates, 1)))
    z0 = np.sqrt(params.sigma2) * rng.standard_normal(n_replicates)
    eps0 = np.sqrt(tau2) * rng.standard_normal(n_replicates)

    xi = np.empty((n_replicates, length), dtype=int)
    phi = np.zeros((n_replicates, length), dtype=bool)
    z = np.empty((n_replicates, length))
    x = np.empty((n_replicates, length))
    xi[:, 0], z[:, 0] = xi0, z0
    x[:, 0] = params.mu[xi0] + z0 + eps0
    if length > 1:
        xi[:, 1:], phi[:, 1:], z[:, 1:], x[:, 1:] = simulate_forward(
            params.lam, pi, params.mu, params.sigma2, params.rho, tau2, xi0, z0, length - 1, rng
        )
    return xi, phi, z, x


def simulate_job(
    params: JobParams,
    parent: ParentParams,
    length: int,
    n_replicates: int = 1,
    seed: SeedLike = 0,
    job_id: str = "sim",
) -> JobSeries:
    """
    Generate a job's power series from its parameters.

    Replicates share parameters but draw independent xi, z and noise;
    readings are floored at 0 W.
    """
    rng = as_generator(seed, "simulate_job", job_id)
    _, _, _, x = simulate_paths(params, parent.tau2, length, n_replicates, rng)
    return JobSeries(job_id, np.maximum(x, 0.0))


# ---------------------------------------------------------------------------
# Prior sampling
# ---------------------------------------------------------------------------

def sample_parent_from_hyperpriors(h: HyperPriors, seed: SeedLike = 0) -> ParentParams:
    """Draw every parent parameter from its hyperprior"""
    rng = as_generator(seed, "parent_prior")
    m = h.n_components
    gamma = rng.gamma(h.a_gamma, 1.0 / h.b_gamma)
    parent = ParentParams(
        mu_sigma=rng.normal(h.m_sigma, np.sqrt(h.s2_sigma)),
        sigma2_sigma=inverse_gamma(rng, h.a_sigma, h.b_sigma),
        mu_rho=rng.normal(h.m_rho, np.sqrt(h.s2_rho)),
        sigma2_rho=inverse_gamma(rng, h.a_rho, h.b_rho),
        u=clip_fraction(rng.beta(1.0, gamma, size=m)),
        nu=rng.normal(h.m_nu, np.sqrt(h.s2_nu), size=m),
        varsigma2=inverse_gamma(rng, h.a_varsigma, h.b_varsigma, size=m),
        alpha_lambda=rng.gamma(h.a_lambda, 1.0 / h.b_lambda),
        beta_lambda=rng.gamma(h.c_lambda, 1.0 / h.d_lambda),
        gamma=gamma,
        delta=rng.gamma(h.a_delta, 1.0 / h.b_delta),
        tau2=inverse_gamma(rng, h.a_tau, h.b_tau),
    )
    return parent


def sample_job_from_parent(
    p: ParentParams,
    seed: SeedLike = 0,
    n_regimes: int = 10,
    length: int = 0,
    n_replicates: int = 1,
) -> JobParams:
    """
    Draw a job's parameters from the parent.

    With ``length`` > 0 the latent paths (xi, phi, z) are simulated too;
    otherwise they are empty.
    """
    rng = as_generator(seed, "job_prior")
    k = n_regimes
    psi = categorical(rng, np.tile(p.omega, (k, 1)))
    params = JobParams(
        xi=np.zeros((n_replicates, 0), dtype=int),
        phi=np.zeros((n_replicates, 0), dtype=bool),
        lam=clip_fraction(rng.beta(p.alpha_lambda, p.beta_lambda, size=k)),
        v=clip_fraction(rng.beta(1.0, p.delta, size=k)),
        mu=rng.normal(p.nu[psi], np.sqrt(p.varsigma2[psi])),
        psi=psi,
        z=np.zeros((n_replicates, 0)),
        sigma2=float(np.exp(rng.normal(p.mu_sigma, np.sqrt(p.sigma2_sigma)))),
        rho=float(np.exp(rng.normal(p.mu_rho, np.sqrt(p.sigma2_rho)))),
    )
    if length > 0:
        params.xi, params.phi, params.z, _ = simulate_paths(params, p.tau2, length, n_replicates, rng)
    return params
