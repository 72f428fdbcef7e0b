"""
Calibration of predicted degradation.

For each job the actual degradation over the next minutes is placed within
its predictive distribution (randomized probability-integral transform) and
mapped to a Z-score. Under a calibrated model the sorted Z-scores follow the
standard-normal order statistics; a simultaneous band for them is built by
Monte Carlo.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from scipy.stats import beta, norm

from jobpower.config.run_config import CalibrationConfig, McmcConfig, UpdateConfig
from jobpower.config.settings import settings
from jobpower.services.core_model import JobSeries, SeedLike, as_generator
from jobpower.services.degradation import cap_for_target, excess_delta, job_degradation
from jobpower.services.job_predictor import FixedParent, PredictiveEnsemble, predict, update_job
from jobpower.services.pragmatic_estimator import EmpiricalParent, predict_pragmatic, update_job_pragmatic
from jobpower.utils.exceptions import DomainError
from jobpower.utils.rng import stream

logger = structlog.get_logger(__name__)

Predictor = Callable[[JobSeries, int, int, int], PredictiveEnsemble]


@dataclass
class CalibrationResult:
    history_length: int
    target: float
    z_scores: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    excluded: List[str] = field(default_factory=list)

    @property
    def inside(self) -> bool:
        z = np.sort(self.z_scores)
        return bool(np.all((z >= self.lower) & (z <= self.upper)))

    @property
    def n_outside(self) -> int:
        z = np.sort(self.z_scores)
        return int(np.sum((z < self.lower) | (z > self.upper)))


def randomized_pit(samples: np.ndarray, actual: float, rng: np.random.Generator) -> float:
    """Rank of ``actual`` among ``samples`` with ties broken at random, scaled into (0, 1)"""
    samples = np.asarray(samples, dtype=float)
    below = np.sum(samples < actual)
    ties = np.sum(samples == actual)
    return float((below + rng.random() * (ties + 1)) / (samples.size + 1))


def simultaneous_qq_band(
    n: int,
    level: float = 0.95,
    n_sim: int = 2000,
    seed: SeedLike = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Simultaneous band for the sorted values of n standard-normal Z-scores.

    Each simulated sample is scored by its smallest pointwise two-sided
    p-value under the exact order-statistic laws; the band is the set of
    values whose pointwise p-value reaches the (1 - level) quantile of that
    score.

    Returns:
        (lower, upper), each of length n
    """
    if n < 1:
        raise DomainError("a Q-Q band needs at least one score")
    rng = as_generator(seed, "qq_band", n)
    i = np.arange(1, n + 1)
    a, b = i, n - i + 1

    sims = np.sort(rng.standard_normal((n_sim, n)), axis=1)
    cdf = beta.cdf(norm.cdf(sims), a, b)
    pointwise = 2.0 * np.minimum(cdf, 1.0 - cdf)
    threshold = float(np.quantile(pointwise.min(axis=1), 1.0 - level))

    lower = norm.ppf(beta.ppf(threshold / 2.0, a, b))
    upper = norm.ppf(beta.ppf(1.0 - threshold / 2.0, a, b))
    return lower, upper


def calibration_zscores(
    predicted: Sequence[np.ndarray],
    actual: Sequence[float],
    job_ids: Optional[Sequence[str]] = None,
    level: float = 0.95,
    n_sim: int = 2000,
    seed: SeedLike = 0,
    history_length: int = 0,
    target: float = 0.0,
) -> CalibrationResult:
    """
    Z-score of every actual degradation within its predictive samples, plus
    the simultaneous band check. Jobs whose predictive SD is zero are excluded.
    """
    rng = as_generator(seed, "pit")
    job_ids = list(job_ids) if job_ids is not None else [str(i) for i in range(len(actual))]
    z, excluded = [], []
    for job_id, samples, value in zip(job_ids, predicted, actual):
        if np.std(samples) == 0:
            logger.warning("Degenerate predictive distribution, job excluded",
                           job_id=job_id, history=history_length, target=target)
            excluded.append(job_id)
            continue
        z.append(norm.ppf(randomized_pit(samples, value, rng)))

    z = np.array(z)
    if z.size == 0:
        raise DomainError("every job was excluded from calibration")
    lower, upper = simultaneous_qq_band(z.size, level, n_sim, seed=rng)
    return CalibrationResult(history_length, target, z, lower, upper, excluded)


def shrink_ensemble(ensemble: PredictiveEnsemble, variance_factor: float) -> PredictiveEnsemble:
    """Scale each minute's spread around its mean so its variance changes by ``variance_factor``"""
    watts = ensemble.cage_watts
    center = watts.mean(axis=0, keepdims=True)
    shrunk = center + np.sqrt(variance_factor) * (watts - center)
    return PredictiveEnsemble(ensemble.job_id, np.maximum(shrunk, 0.0), ensemble.n_cages, ensemble.start_minute)


def bayesian_predictor(
    parent: FixedParent,
    update_config: Optional[McmcConfig] = None,
    n_regimes: int = 10,
) -> Predictor:
    """Predictor that updates a job against a fixed parent then simulates its future"""
    update_config = update_config or UpdateConfig()

    def run(history: JobSeries, horizon: int, realizations: int, seed: int) -> PredictiveEnsemble:
        config = update_config.model_copy(update={"seed": int(seed)})
        chain = update_job(history, parent, config, n_regimes)
        return predict(chain, parent, horizon, realizations, history.n_cages,
                       seed=stream(seed, "predict", history.job_id),
                       job_id=history.job_id, start_minute=history.start_minute + history.length)

    return run


def pragmatic_predictor(parent: EmpiricalParent, independent: bool = False) -> Predictor:
    def run(history: JobSeries, horizon: int, realizations: int, seed: int) -> PredictiveEnsemble:
        posterior = update_job_pragmatic(history, parent, independent)
        return predict_pragmatic(posterior, parent, horizon, realizations, history.n_cages,
                                 seed=stream(seed, "predict_pragmatic", history.job_id),
                                 job_id=history.job_id, start_minute=history.start_minute + history.length)

    return run


def run_calibration(
    corpus: Sequence[JobSeries],
    predictor: Predictor,
    idle_power: float,
    config: Optional[CalibrationConfig] = None,
    seed: int = 0,
    threads: Optional[int] = None,
    variance_factor: float = 1.0,
) -> List[CalibrationResult]:
    """
    Calibration scenarios: every history length crossed with every target.

    The history of each job is right-censored at its ``censor_quantile``; the
    cap for each target is the one whose mean predicted degradation hits the
    target; the actual degradation is scored on the true next ``horizon``
    minutes. ``variance_factor`` < 1 gives the shrunken negative control.
    """
    config = config or CalibrationConfig()
    workers = max(1, threads or settings.THREADS)
    results: List[CalibrationResult] = []

    for h in config.history_lengths:
        usable = [s for s in corpus if s.length >= h + config.horizon]
        if len(usable) < len(corpus):
            logger.warning("Jobs too short for scenario skipped", history=h, skipped=len(corpus) - len(usable))

        def forecast(job: JobSeries, h: int = h) -> PredictiveEnsemble:
            history = job.head(h).censor_at_quantile(config.censor_quantile)
            job_seed = int(stream(seed, "calibration", h, job.job_id).integers(2**31))
            ensemble = predictor(history, config.horizon, config.realizations, job_seed)
            if variance_factor != 1.0:
                ensemble = shrink_ensemble(ensemble, variance_factor)
            return ensemble

        with ThreadPoolExecutor(max_workers=workers) as executor:
            ensembles = list(executor.map(forecast, usable))

        for target in config.targets:
            predicted, actual = [], []
            for job, ensemble in zip(usable, ensembles):
                cap = cap_for_target(ensemble, idle_power, target)
                predicted.append(excess_delta(ensemble.cage_watts, cap, idle_power) / config.horizon)
                future = job.window(h, h + config.horizon)
                actual.append(job_degradation(future.watts, cap, idle_power).relative_increase)

            result = calibration_zscores(
                predicted, actual, [s.job_id for s in usable], config.level, config.n_band_simulations,
                seed=stream(seed, "calibration", h, f"{target:.6g}"), history_length=h, target=target,
            )
            logger.info("Calibration scenario scored",
                        history=h,
                        target=target,
                        jobs=len(result.z_scores),
                        inside=result.inside,
                        outside=result.n_outside)
            results.append(result)
    return results


def calibration_table(results: Sequence[CalibrationResult]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "history_minutes": r.history_length,
            "target": r.target,
            "jobs": int(r.z_scores.size),
            "excluded": len(r.excluded),
            "z_mean": float(r.z_scores.mean()),
            "z_sd": float(r.z_scores.std(ddof=1)) if r.z_scores.size > 1 else 0.0,
            "outside_band": r.n_outside,
            "inside": r.inside,
        }
        for r in results
    ])


def zscore_table(results: Sequence[CalibrationResult]) -> pd.DataFrame:
    """Sorted Z-scores with their band, ready for Q-Q plots"""
    frames = []
    for r in results:
        n = r.z_scores.size
        frames.append(pd.DataFrame({
            "history_minutes": r.history_length,
            "target": r.target,
            "normal_quantile": norm.ppf((np.arange(1, n + 1) - 0.5) / n),
            "z": np.sort(r.z_scores),
            "lower": r.lower,
            "upper": r.upper,
        }))
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
