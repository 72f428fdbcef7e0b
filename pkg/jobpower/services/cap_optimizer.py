"""
Machine-wide cap allocation under a total power budget.

The budget identity is

    sum_j c_j * N_j + idle_cap * n_idle = total - baseline

where c_j is the per-cage cap of running job j on N_j cages.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import structlog
from scipy.optimize import minimize

from jobpower.config.run_config import MachineConfig, OptimizerConfig
from jobpower.services.core_model import SeedLike, as_generator
from jobpower.services.degradation import excess_delta
from jobpower.services.job_predictor import PredictiveEnsemble
from jobpower.utils.exceptions import ConfigurationError, DomainError
from jobpower.utils.monitoring import monitor_performance

logger = structlog.get_logger(__name__)

OBJECTIVES = ("weighted_mean", "expected_max")
PENALTY_WEIGHT = 1e6

EnsembleLike = Union[PredictiveEnsemble, np.ndarray]


@dataclass(frozen=True)
class Budget:
    """Power budget of the machine at one planning instant"""

    total: float
    baseline: float
    idle_cap: float
    n_cages_total: int
    n_idle: int

    def __post_init__(self):
        if self.total <= self.baseline:
            raise ConfigurationError(f"total budget {self.total} W must exceed baseline {self.baseline} W")
        if not 0 <= self.n_idle <= self.n_cages_total:
            raise ConfigurationError("idle cages must be between 0 and the machine size")
        if self.n_idle < self.n_cages_total and self.job_budget <= 0:
            raise ConfigurationError(f"no power left for running jobs (job budget {self.job_budget:.1f} W)")

    @property
    def job_budget(self) -> float:
        """Power available to the cages running jobs"""
        return self.total - self.baseline - self.idle_cap * self.n_idle

    @property
    def cage_area_budget(self) -> float:
        """Power available to all cages, idle ones included"""
        return self.total - self.baseline

    @classmethod
    def from_machine(cls, machine: MachineConfig, n_idle: int, total: Optional[float] = None) -> "Budget":
        return cls(
            total=machine.total_power_w if total is None else total,
            baseline=machine.baseline_w,
            idle_cap=machine.idle_cap_w,
            n_cages_total=machine.n_cages,
            n_idle=n_idle,
        )


@dataclass
class CapPlan:
    """Per-cage cap for every running job"""

    job_ids: List[str]
    caps: np.ndarray
    cage_counts: np.ndarray
    strategy: str
    objective: Optional[float] = None
    stagnated: bool = False
    evaluations: int = 0

    def budget_error(self, budget: Budget) -> float:
        """Relative violation of the budget identity"""
        used = float(np.sum(self.caps * self.cage_counts)) + budget.idle_cap * budget.n_idle
        return abs(used - budget.cage_area_budget) / budget.cage_area_budget

    def to_records(self) -> List[Dict[str, Any]]:
        return [
            {
                "job_id": job_id,
                "cap_watts": float(cap),
                "n_cages": int(n),
                "strategy": self.strategy,
                "objective_estimate": None if self.objective is None else float(self.objective),
            }
            for job_id, cap, n in zip(self.job_ids, self.caps, self.cage_counts)
        ]

    def to_json(self) -> Dict[str, Any]:
        return {"strategy": self.strategy, "stagnated": self.stagnated, "jobs": self.to_records()}


def _job_ids(job_ids: Optional[Sequence[str]], n: int) -> List[str]:
    return list(job_ids) if job_ids is not None else [str(i) for i in range(n)]


def naive_caps(
    budget: Budget,
    cage_counts: Sequence[int] = (),
    job_ids: Optional[Sequence[str]] = None,
) -> CapPlan:
    """Same cap on every busy cage: the job budget split over busy cages"""
    counts = np.asarray(cage_counts, dtype=int)
    if counts.size == 0 or budget.n_idle >= budget.n_cages_total:
        return CapPlan([], np.zeros(0), np.zeros(0, dtype=int), "c_naive")
    cap = budget.job_budget / counts.sum()
    return CapPlan(_job_ids(job_ids, counts.size), np.full(counts.size, cap), counts, "c_naive")


def reparameterize(c_star, budget: Budget, cage_counts: Sequence[int]) -> np.ndarray:
    """Scale positive weights c* so that sum_j c_j N_j equals the job budget"""
    c_star = np.asarray(c_star, dtype=float)
    counts = np.asarray(cage_counts, dtype=float)
    if np.any(~np.isfinite(c_star)) or np.any(c_star <= 0):
        raise DomainError("reparameterized caps must be positive")
    return c_star * budget.job_budget / np.sum(c_star * counts)


def _stack(ensembles: Sequence[EnsembleLike]) -> np.ndarray:
    traces = [np.atleast_2d(getattr(e, "cage_watts", e)) for e in ensembles]
    if len({t.shape for t in traces}) > 1:
        raise DomainError("all ensembles must share realizations and horizon")
    return np.stack(traces)


def realized_degradation(traces: np.ndarray, caps: np.ndarray, idle: float) -> np.ndarray:
    """Relative increase per job and realization, shape (J, R)"""
    return excess_delta(traces, caps[:, None], idle) / traces.shape[-1]


def degradation_objective(
    caps,
    ensembles: Union[Sequence[EnsembleLike], np.ndarray],
    cage_counts: Sequence[int],
    objective: str,
    idle: float,
) -> float:
    """
    Monte Carlo estimate of the weighted mean of expected degradation, or of
    the expected maximum degradation with jobs paired by realization index.
    """
    traces = ensembles if isinstance(ensembles, np.ndarray) and ensembles.ndim == 3 else _stack(ensembles)
    d = realized_degradation(traces, np.asarray(caps, dtype=float), idle)
    if objective == "weighted_mean":
        counts = np.asarray(cage_counts, dtype=float)
        return float(np.sum(counts * d.mean(axis=1)) / counts.sum())
    if objective == "expected_max":
        return float(d.max(axis=0).mean())
    raise DomainError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")


@monitor_performance
def optimize_caps(
    ensembles: Sequence[EnsembleLike],
    cage_counts: Sequence[int],
    budget: Budget,
    objective: str,
    idle: float,
    config: Optional[OptimizerConfig] = None,
    seed: SeedLike = 0,
    job_ids: Optional[Sequence[str]] = None,
    strategy: Optional[str] = None,
) -> CapPlan:
    """
    Nelder-Mead over the free log-weights of the reparameterized caps.

    The first weight is pinned to 1. Starts are the uniform plan and
    ``n_random_starts`` random ones; the best plan wins, ties going to the
    earlier start. Caps under I + margin are penalized.
    """
    config = config or OptimizerConfig()
    if objective not in OBJECTIVES:
        raise DomainError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    strategy = strategy or ("c_avg" if objective == "weighted_mean" else "c_max")
    counts = np.asarray(cage_counts, dtype=int)
    ids = _job_ids(job_ids, counts.size)
    n_jobs = counts.size
    if n_jobs == 0:
        return CapPlan([], np.zeros(0), counts, strategy, objective=0.0)

    floor = idle + config.floor_margin_w
    uniform = budget.job_budget / counts.sum()
    if uniform <= floor:
        raise ConfigurationError(
            f"job budget {budget.job_budget:.1f} W cannot keep {counts.sum()} cages above {floor:.1f} W"
        )
    traces = _stack(ensembles)

    def evaluate(caps: np.ndarray) -> float:
        shortfall = np.maximum(floor - caps, 0.0)
        value = degradation_objective(np.maximum(caps, floor), traces, counts, objective, idle)
        return value + PENALTY_WEIGHT * float(np.sum(shortfall ** 2))

    if n_jobs == 1:
        caps = reparameterize([1.0], budget, counts)
        return CapPlan(ids, caps, counts, strategy, objective=evaluate(caps), evaluations=1)

    def to_caps(free: np.ndarray) -> np.ndarray:
        return reparameterize(np.exp(np.concatenate(([0.0], free))), budget, counts)

    rng = as_generator(seed, "optimize_caps")
    starts = [np.zeros(n_jobs - 1)]
    starts += [rng.normal(0.0, config.start_spread, n_jobs - 1) for _ in range(config.n_random_starts)]

    best_x, best_value, best_success, total_evals = None, np.inf, True, 0
    for x0 in starts:
        result = minimize(
            lambda free: evaluate(to_caps(free)),
            x0,
            method="Nelder-Mead",
            options={
                "maxfev": config.max_evaluations,
                "xatol": config.xatol,
                "fatol": config.fatol,
                "adaptive": True,
            },
        )
        total_evals += int(result.nfev)
        if result.fun < best_value:
            best_x, best_value, best_success = result.x, float(result.fun), bool(result.success)

    if not best_success:
        logger.warning("Cap optimizer stopped before converging",
                       strategy=strategy, jobs=n_jobs, evaluations=total_evals)
    caps = to_caps(best_x)
    return CapPlan(ids, caps, counts, strategy, objective=best_value,
                   stagnated=not best_success, evaluations=total_evals)
