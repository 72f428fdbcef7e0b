"""
Empirical-Bayes job updating and future power realizations.

The parent is frozen at its posterior means, with the regime-mean parent
replaced by a normal mixture fitted to its posterior-mean density. A running
job is then updated by iterating the job-specific sampler alone, and its
future is simulated from the resulting posterior.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from scipy.optimize import least_squares
from scipy.special import softmax

from jobpower.config.run_config import HyperPriors, McmcConfig, ParentFitConfig, UpdateConfig
from jobpower.services.core_model import (
    JobParams,
    JobSeries,
    ParentParams,
    SeedLike,
    as_generator,
    categorical,
    inverse_stick_break,
    log_stationary_from_rates,
    pi_from_v,
    sample_job_from_parent,
    simulate_forward,
)
from jobpower.services.mcmc_engine import ChainResult, PosteriorSample, run_mcmc
from jobpower.utils.exceptions import DataFormatError, DomainError, MixtureFitError
from jobpower.utils.monitoring import monitor_performance
from jobpower.utils.rng import stream

logger = structlog.get_logger(__name__)

FIXED_PARENT_SCHEMA = "jobpower.fixed_parent/1"


@dataclass
class FixedParent:
    """Parent scalars at posterior means plus a normal-mixture regime-mean parent"""

    scalars: Dict[str, float]
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    source: Dict[str, Any] = field(default_factory=dict)
    fit_residual: float = 0.0
    grid: Optional[np.ndarray] = None
    density: Optional[np.ndarray] = None
    band: Optional[np.ndarray] = None

    @property
    def tau2(self) -> float:
        return self.scalars["tau2"]

    def as_parent(self) -> ParentParams:
        """ParentParams whose stick weights reproduce the mixture weights"""
        u = np.append(inverse_stick_break(self.weights / self.weights.sum()), 0.5)
        return ParentParams(
            u=u,
            nu=self.means.copy(),
            varsigma2=self.variances.copy(),
            **{name: float(self.scalars[name]) for name in ParentParams.SCALARS},
        )

    def mixture_density(self, grid: np.ndarray) -> np.ndarray:
        return normal_mixture_density(grid, self.weights, self.means, self.variances)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "schema": FIXED_PARENT_SCHEMA,
            "scalars": {k: float(v) for k, v in self.scalars.items()},
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "source": self.source,
            "fit_residual": float(self.fit_residual),
        }
        if self.grid is not None:
            data["grid"] = self.grid.tolist()
            data["density"] = self.density.tolist()
            data["band"] = self.band.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FixedParent":
        if data.get("schema") != FIXED_PARENT_SCHEMA:
            raise DataFormatError(f"Unsupported fixed parent schema: {data.get('schema')}")
        try:
            return cls(
                scalars={k: float(v) for k, v in data["scalars"].items()},
                weights=np.array(data["weights"], dtype=float),
                means=np.array(data["means"], dtype=float),
                variances=np.array(data["variances"], dtype=float),
                source=data.get("source", {}),
                fit_residual=float(data.get("fit_residual", 0.0)),
                grid=np.array(data["grid"]) if "grid" in data else None,
                density=np.array(data["density"]) if "density" in data else None,
                band=np.array(data["band"]) if "band" in data else None,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed fixed parent: {e}") from e

    @classmethod
    def from_parent(cls, parent: ParentParams, source: Optional[Dict[str, Any]] = None) -> "FixedParent":
        """Freeze a known parent as-is (no mixture refit)"""
        return cls(
            scalars=parent.scalars(),
            weights=parent.omega,
            means=parent.nu.copy(),
            variances=parent.varsigma2.copy(),
            source=source or {"kind": "parent"},
        )


@dataclass
class PredictiveEnsemble:
    """
    R realizations of a job's cage-level power over the next ``horizon`` minutes.

    Cages of a multi-cage job move in lockstep, so job power is
    n_cages times cage power.
    """

    job_id: str
    cage_watts: np.ndarray
    n_cages: int = 1
    start_minute: int = 0

    def __post_init__(self):
        self.cage_watts = np.atleast_2d(np.asarray(self.cage_watts, dtype=float))
        if self.cage_watts.shape[0] < 1:
            raise DomainError("an ensemble needs at least one realization")

    @property
    def horizon(self) -> int:
        return self.cage_watts.shape[1]

    @property
    def realizations(self) -> int:
        return self.cage_watts.shape[0]

    def total_watts(self) -> np.ndarray:
        return self.n_cages * self.cage_watts

    def to_frame(self) -> pd.DataFrame:
        r, h = self.cage_watts.shape
        return pd.DataFrame({
            "job_id": self.job_id,
            "n_cages": self.n_cages,
            "realization": np.repeat(np.arange(r), h),
            "minute": np.tile(self.start_minute + np.arange(h), r),
            "watts": self.cage_watts.ravel(),
        })

    @classmethod
    def from_frame(cls, df: pd.DataFrame, n_cages: int = 1) -> List["PredictiveEnsemble"]:
        """One ensemble per job_id; an ``n_cages`` column overrides the default cage count"""
        missing = [c for c in ("job_id", "realization", "minute", "watts") if c not in df.columns]
        if missing:
            raise DataFormatError("Missing required column", column=missing[0])
        ensembles = []
        for job_id, rows in df.groupby("job_id", sort=False):
            rows = rows.sort_values(["realization", "minute"], kind="stable")
            r = rows["realization"].nunique()
            watts = rows["watts"].to_numpy(dtype=float)
            if watts.size % r:
                raise DataFormatError(f"ensemble for job {job_id} is ragged")
            cages = int(rows["n_cages"].iloc[0]) if "n_cages" in rows.columns else n_cages
            ensembles.append(cls(str(job_id), watts.reshape(r, -1), n_cages=cages,
                                 start_minute=int(rows["minute"].min())))
        return ensembles


JOB_POSTERIOR_SCHEMA = "jobpower.job_posterior/1"


@dataclass
class JobPosterior:
    """Posterior draws of one running job, as written by ``update-job``"""

    job_id: str
    draws: List[JobParams]
    n_cages: int = 1
    next_minute: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema": JOB_POSTERIOR_SCHEMA,
            "job_id": self.job_id,
            "n_cages": self.n_cages,
            "next_minute": self.next_minute,
            "draws": [d.to_dict() for d in self.draws],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "JobPosterior":
        if data.get("schema") != JOB_POSTERIOR_SCHEMA:
            raise DataFormatError(f"Unsupported job posterior schema: {data.get('schema')}")
        try:
            return cls(
                job_id=str(data["job_id"]),
                draws=[JobParams.from_dict(d) for d in data["draws"]],
                n_cages=int(data["n_cages"]),
                next_minute=int(data["next_minute"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Malformed job posterior: {e}") from e


# ---------------------------------------------------------------------------
# Parent fixing
# ---------------------------------------------------------------------------

def normal_mixture_density(grid, weights, means, variances) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)[:, None]
    variances = np.asarray(variances, dtype=float)
    comps = np.exp(-0.5 * (grid - means) ** 2 / variances) / np.sqrt(2.0 * np.pi * variances)
    return comps @ np.asarray(weights, dtype=float)


def fit_normal_mixture(
    grid: np.ndarray,
    target: np.ndarray,
    n_components: int = 10,
    restarts: int = 5,
    seed: SeedLike = 0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """
    Least-squares fit of an n-component normal mixture to a density on a grid.

    Works in standardized coordinates; the first start places the means at
    quantiles of the target, later starts jitter them.

    Returns:
        (weights, means, variances, relative L2 residual)
    """
    rng = as_generator(seed, "mixture_fit")
    grid = np.asarray(grid, dtype=float)
    target = np.asarray(target, dtype=float)
    center = float(np.sum(grid * target) / np.sum(target))
    scale = float(np.sqrt(np.sum((grid - center) ** 2 * target) / np.sum(target))) or 1.0
    g = (grid - center) / scale
    y = target * scale
    dx = float(np.min(np.diff(g)))
    norm = np.linalg.norm(y)

    cdf = np.cumsum(y)
    cdf /= cdf[-1]
    base_means = np.interp((np.arange(n_components) + 0.5) / n_components, cdf, g)
    lower = np.concatenate([np.full(n_components, -20.0), np.full(n_components, g[0]), np.full(n_components, np.log(dx))])
    upper = np.concatenate([np.full(n_components, 20.0), np.full(n_components, g[-1]), np.full(n_components, np.log(g[-1] - g[0]))])

    def residual(theta: np.ndarray) -> np.ndarray:
        w = softmax(theta[:n_components])
        m = theta[n_components:2 * n_components]
        s2 = np.exp(2.0 * theta[2 * n_components:])
        return normal_mixture_density(g, w, m, s2) - y

    best, best_cost = None, np.inf
    for attempt in range(restarts):
        jitter = 0.0 if attempt == 0 else 0.25
        x0 = np.concatenate([
            rng.normal(0.0, jitter, n_components),
            base_means + rng.normal(0.0, jitter, n_components),
            np.full(n_components, np.log(max(0.5, 2.0 / n_components))) + rng.normal(0.0, jitter, n_components),
        ])
        x0 = np.clip(x0, lower + 1e-9, upper - 1e-9)
        result = least_squares(residual, x0, bounds=(lower, upper), method="trf", x_scale="jac", max_nfev=2000)
        if result.cost < best_cost:
            best, best_cost = result.x, result.cost

    weights = softmax(best[:n_components])
    means = center + scale * best[n_components:2 * n_components]
    variances = (scale * np.exp(best[2 * n_components:])) ** 2
    rel = float(np.sqrt(2.0 * best_cost) / norm)
    order = np.argsort(means)
    return weights[order], means[order], variances[order], rel


def _collect_samples(chain: Union[ChainResult, Sequence[ChainResult], Sequence[PosteriorSample]]) -> List[PosteriorSample]:
    if isinstance(chain, ChainResult):
        return list(chain.samples)
    samples: List[PosteriorSample] = []
    for item in chain:
        if isinstance(item, ChainResult):
            samples.extend(item.samples)
        else:
            samples.append(item)
    return samples


@monitor_performance
def fix_parent(
    chain: Union[ChainResult, Sequence[ChainResult], Sequence[PosteriorSample]],
    grid: Optional[np.ndarray] = None,
    config: Optional[ParentFitConfig] = None,
    seed: SeedLike = 0,
) -> FixedParent:
    """
    Freeze the parent at its posterior means and approximate the posterior-mean
    density of the regime means by a normal mixture.

    Args:
        chain: post-burn-in samples (one or several chains)
        grid: evaluation grid; defaults to ``grid_points`` points spanning the
            sampled regime means +/- 3 SD
        config: mixture size, grid size, restarts and tolerance

    Returns:
        FixedParent

    Raises:
        MixtureFitError: relative L2 residual above the tolerance
    """
    config = config or ParentFitConfig()
    samples = _collect_samples(chain)
    if not samples:
        raise DomainError("fix_parent needs at least one posterior sample")

    scalars = {
        name: float(np.mean([getattr(s.parent, name) for s in samples]))
        for name in ParentParams.SCALARS
    }

    if grid is None:
        mus = np.concatenate([j.mu for s in samples for j in s.jobs]) if samples[0].jobs else \
            np.concatenate([s.parent.nu for s in samples])
        spread = float(np.std(mus)) or 1.0
        grid = np.linspace(mus.min() - 3.0 * spread, mus.max() + 3.0 * spread, config.grid_points)
    grid = np.asarray(grid, dtype=float)

    densities = np.empty((len(samples), grid.size))
    for i, s in enumerate(samples):
        densities[i] = normal_mixture_density(grid, s.parent.omega, s.parent.nu, s.parent.varsigma2)
    density = densities.mean(axis=0)
    band = np.quantile(densities, [0.025, 0.975], axis=0)

    weights, means, variances, residual = fit_normal_mixture(
        grid, density, config.n_components, config.restarts, seed
    )
    logger.info("Parent mixture fitted",
                components=config.n_components,
                samples=len(samples),
                relative_residual=round(residual, 6))
    if residual > config.tolerance:
        raise MixtureFitError("mixture approximation of the regime-mean parent missed its tolerance", residual)

    chains = [chain] if isinstance(chain, ChainResult) else [c for c in chain if isinstance(c, ChainResult)]
    source = {
        "chains": sorted(c.chain_id for c in chains),
        "samples": len(samples),
        "first_iteration": int(samples[0].iteration),
        "last_iteration": int(samples[-1].iteration),
    }
    return FixedParent(
        scalars=scalars, weights=weights, means=means, variances=variances,
        source=source, fit_residual=residual, grid=grid, density=density, band=band,
    )


# ---------------------------------------------------------------------------
# Updating and prediction
# ---------------------------------------------------------------------------

@monitor_performance
def update_job(
    history: JobSeries,
    parent: Union[FixedParent, ParentParams],
    config: Optional[McmcConfig] = None,
    n_regimes: int = 10,
) -> List[JobParams]:
    """
    Posterior draws of a job's parameters with the parent held fixed.

    An empty history yields prior-predictive draws from the parent.
    """
    config = config or UpdateConfig()
    fixed = parent.as_parent() if isinstance(parent, FixedParent) else parent
    n_draws = len(range(config.burn_in, config.n_iterations, config.thin))

    if history.length == 0:
        return [
            sample_job_from_parent(fixed, stream(config.seed, "prior_predictive", history.job_id, i),
                                   n_regimes, n_replicates=history.n_cages)
            for i in range(n_draws)
        ]

    result = run_mcmc(
        [history],
        HyperPriors(n_regimes=n_regimes),
        config,
        threads=1,
        fixed_parent=fixed,
        stream_label=f"update:{history.job_id}",
    )
    return result.job_trace(0)


def predict(
    chain: Sequence[JobParams],
    parent: Union[FixedParent, ParentParams],
    horizon: int,
    realizations: int = 1000,
    n_cages: int = 1,
    seed: SeedLike = 0,
    job_id: str = "job",
    start_minute: int = 0,
) -> PredictiveEnsemble:
    """
    Simulate ``realizations`` futures of ``horizon`` minutes.

    Each realization picks a posterior draw, continues xi from its last
    regime via the TPM and z from its last value via the AR(1) kernel, and
    adds fresh observation noise. Draws without paths start from the
    stationary regime law and z ~ N(0, sigma2). Watts are floored at 0.
    """
    if horizon < 1 or realizations < 1:
        raise DomainError("horizon and realizations must be at least 1")
    if not chain:
        raise DomainError("predict needs at least one posterior draw")
    rng = as_generator(seed, "predict", job_id)
    tau2 = parent.tau2

    picks = rng.integers(len(chain), size=realizations)
    drawn = [chain[i] for i in picks]
    lam = np.array([p.lam for p in drawn])
    pi = np.array([pi_from_v(p.v) for p in drawn])
    mu = np.array([p.mu for p in drawn])
    sigma2 = np.array([p.sigma2 for p in drawn])
    rho = np.array([p.rho for p in drawn])

    xi0 = np.empty(realizations, dtype=int)
    z0 = np.empty(realizations)
    fresh = np.array([p.length == 0 for p in drawn])
    for r, p in enumerate(drawn):
        if not fresh[r]:
            xi0[r], z0[r] = p.xi[0, -1], p.z[0, -1]
    if fresh.any():
        log_s = np.array([log_stationary_from_rates(lam[r], pi[r]) for r in np.flatnonzero(fresh)])
        xi0[fresh] = categorical(rng, np.exp(log_s))
        z0[fresh] = np.sqrt(sigma2[fresh]) * rng.standard_normal(int(fresh.sum()))

    _, _, _, x = simulate_forward(lam, pi, mu, sigma2, rho, tau2, xi0, z0, horizon, rng)
    return PredictiveEnsemble(job_id, np.maximum(x, 0.0), n_cages=n_cages, start_minute=start_minute)
