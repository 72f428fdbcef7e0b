"""
Machine simulator: job corpus, queue to steady state, and scoring of capping
strategies on the resulting job mixes.
"""

import heapq
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from jobpower.config.run_config import STRATEGIES, MachineConfig, RunConfig
from jobpower.config.settings import settings
from jobpower.services.cap_optimizer import Budget, CapPlan, naive_caps, optimize_caps
from jobpower.services.core_model import (
    JobParams,
    JobSeries,
    ParentParams,
    SeedLike,
    as_generator,
    sample_job_from_parent,
    simulate_paths,
)
from jobpower.services.degradation import job_degradation
from jobpower.services.job_predictor import PredictiveEnsemble, predict, update_job
from jobpower.services.pragmatic_estimator import predict_pragmatic, update_job_pragmatic
from jobpower.services.trace_io import read_json
from jobpower.utils.exceptions import ConfigurationError, DataFormatError, JobPowerException
from jobpower.utils.monitoring import monitor_performance
from jobpower.utils.rng import stream

logger = structlog.get_logger(__name__)

REFERENCE_PARENT_PATH = os.path.join(os.path.dirname(os.path.dirname(__file__)), "data", "reference_parent.json")


@dataclass
class JobTemplate:
    """A job that can be launched on the machine: its full true trace and, when synthetic, its parameters"""

    template_id: str
    trace: JobSeries
    params: Optional[JobParams] = None

    @property
    def duration(self) -> int:
        return self.trace.length

    @property
    def n_cages(self) -> int:
        return self.trace.n_cages


@dataclass
class RunningJob:
    template_id: str
    cage_ids: List[int]
    start_minute: int

    @property
    def n_cages(self) -> int:
        return len(self.cage_ids)


@dataclass
class JobMix:
    """Roster of the machine at one instant of the queue simulation"""

    minute: int
    running: List[RunningJob]
    queue: List[str]
    completed: int
    n_cages: int
    occupancy: List[Tuple[int, int, int]] = field(default_factory=list)

    @property
    def busy_cages(self) -> int:
        return sum(j.n_cages for j in self.running)

    @property
    def n_idle(self) -> int:
        return self.n_cages - self.busy_cages

    def occupancy_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.occupancy, columns=["minute", "running_jobs", "busy_cages"])


@dataclass
class StrategyScore:
    mix: int
    strategy: str
    weighted_avg: float
    maximum: float


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

def load_reference_parent(path: str = REFERENCE_PARENT_PATH) -> ParentParams:
    """Versioned parent used to generate synthetic corpora"""
    return ParentParams.from_dict(read_json(path))


def _truncated_geometric(rng: np.random.Generator, p: float, upper: int) -> int:
    top = 1.0 - (1.0 - p) ** upper
    u = rng.random() * top
    return int(min(upper, max(1, np.ceil(np.log1p(-u) / np.log1p(-p)))))


def generate_corpus(
    n_templates: int,
    parent: ParentParams,
    seed: SeedLike = 0,
    n_regimes: int = 10,
    min_duration: int = 10,
    max_duration: int = 601,
    max_cages: int = 12,
    cage_p: float = 0.45,
) -> List[JobTemplate]:
    """
    Synthetic job templates drawn from ``parent``: durations uniform on
    [min_duration, max_duration] minutes, cage counts truncated geometric on
    1..max_cages.
    """
    base = as_generator(seed, "corpus")
    base_seed = int(base.integers(2**31))
    templates = []
    for i in range(n_templates):
        rng = stream(base_seed, "template", i)
        duration = int(rng.integers(min_duration, max_duration + 1))
        cages = _truncated_geometric(rng, cage_p, max_cages)
        params = sample_job_from_parent(parent, rng, n_regimes)
        params.xi, params.phi, params.z, x = simulate_paths(params, parent.tau2, duration, cages, rng)
        template_id = f"job{i:04d}"
        templates.append(JobTemplate(template_id, JobSeries(template_id, np.maximum(x, 0.0)), params))
    logger.info("Synthetic corpus generated", templates=n_templates)
    return templates


def templates_from_series(corpus: Sequence[JobSeries]) -> List[JobTemplate]:
    return [JobTemplate(s.job_id, s) for s in corpus]


def validate_corpus(corpus: Sequence[JobTemplate], n_cages: int) -> None:
    if not corpus:
        raise DataFormatError("job corpus is empty")
    for t in corpus:
        if t.n_cages > n_cages:
            raise DataFormatError(f"job {t.template_id} needs {t.n_cages} cages, machine has {n_cages}")
        if t.duration < 1:
            raise DataFormatError(f"job {t.template_id} has no readings")


# ---------------------------------------------------------------------------
# Queue
# ---------------------------------------------------------------------------

def run_queue_to_steady_state(
    corpus: Sequence[JobTemplate],
    config: MachineConfig,
    seed: SeedLike = 0,
) -> JobMix:
    """
    Launch templates sampled uniformly with replacement, in sampled order.

    After every completion all jobs at the head of the queue that fit are
    admitted; the first one that does not fit blocks the rest. Stops once
    ``steady_state_completed`` jobs have finished.
    """
    validate_corpus(corpus, config.n_cages)
    rng = as_generator(seed, "queue")
    by_id = {t.template_id: t for t in corpus}
    free = list(range(config.n_cages))
    heapq.heapify(free)
    running: List[RunningJob] = []
    queue: deque = deque()
    occupancy: List[Tuple[int, int, int]] = []
    minute, completed = 0, 0

    def head() -> JobTemplate:
        if not queue:
            queue.append(corpus[int(rng.integers(len(corpus)))])
        return queue[0]

    def admit() -> None:
        while head().n_cages <= len(free):
            template = queue.popleft()
            cages = sorted(heapq.heappop(free) for _ in range(template.n_cages))
            running.append(RunningJob(template.template_id, cages, minute))
        occupancy.append((minute, len(running), config.n_cages - len(free)))

    admit()
    while completed < config.steady_state_completed:
        minute = min(j.start_minute + by_id[j.template_id].duration for j in running)
        still_running = []
        for job in running:
            if job.start_minute + by_id[job.template_id].duration == minute:
                for cage in job.cage_ids:
                    heapq.heappush(free, cage)
                completed += 1
            else:
                still_running.append(job)
        running = still_running
        admit()

    return JobMix(
        minute=minute,
        running=running,
        queue=[t.template_id for t in queue],
        completed=completed,
        n_cages=config.n_cages,
        occupancy=occupancy,
    )


def sample_mixes(
    corpus: Sequence[JobTemplate],
    config: MachineConfig,
    seed: int = 0,
    n_mixes: Optional[int] = None,
) -> List[JobMix]:
    n_mixes = config.n_mixes if n_mixes is None else n_mixes
    return [run_queue_to_steady_state(corpus, config, stream(seed, "mix", i)) for i in range(n_mixes)]


# ---------------------------------------------------------------------------
# Power of a mix
# ---------------------------------------------------------------------------

def job_window(template: JobTemplate, start: int, stop: int, idle_power: float) -> np.ndarray:
    """True cage-level power for minutes [start, stop) of a job, idle once it has ended"""
    out = np.full((template.n_cages, stop - start), float(idle_power))
    end = min(stop, template.duration)
    if end > start:
        out[:, : end - start] = template.trace.watts[:, start:end]
    return out


def job_history(template: JobTemplate, job: RunningJob, minute: int, censor_quantile: Optional[float]) -> JobSeries:
    elapsed = minute - job.start_minute
    history = template.trace.head(elapsed)
    history = JobSeries(f"{template.template_id}@{job.start_minute}", history.watts, history.caps)
    if censor_quantile is not None and history.length > 0:
        history = history.censor_at_quantile(censor_quantile)
    return history


def _futures(mix: JobMix, by_id: Dict[str, JobTemplate], machine: MachineConfig) -> List[np.ndarray]:
    return [
        job_window(by_id[j.template_id], mix.minute - j.start_minute,
                   mix.minute - j.start_minute + machine.planning_window, machine.idle_power_w)
        for j in mix.running
    ]


def uncapped_job_demand(mix: JobMix, corpus: Sequence[JobTemplate], machine: MachineConfig) -> np.ndarray:
    """Per-minute power drawn by the running jobs over the next planning window"""
    by_id = {t.template_id: t for t in corpus}
    futures = _futures(mix, by_id, machine)
    return np.sum([f.sum(axis=0) for f in futures], axis=0) if futures else np.zeros(machine.planning_window)


def enforced_machine_power(
    mix: JobMix,
    plan: CapPlan,
    corpus: Sequence[JobTemplate],
    machine: MachineConfig,
) -> np.ndarray:
    """Per-minute machine power with every cage drawing min(draw, cap)"""
    by_id = {t.template_id: t for t in corpus}
    power = np.full(machine.planning_window, machine.baseline_w + mix.n_idle * machine.idle_power_w)
    for future, cap in zip(_futures(mix, by_id, machine), plan.caps):
        power += np.minimum(future, cap).sum(axis=0)
    return power


def budget_for_demand_fraction(
    mixes: Sequence[JobMix],
    corpus: Sequence[JobTemplate],
    machine: MachineConfig,
    fraction: float,
) -> float:
    """Job-area budget equal to ``fraction`` of the mean uncapped job demand over the mixes"""
    demand = np.mean([uncapped_job_demand(m, corpus, machine).mean() for m in mixes])
    return float(fraction * demand)


# ---------------------------------------------------------------------------
# Strategy evaluation
# ---------------------------------------------------------------------------

def _ensemble_for(
    model: str,
    history: JobSeries,
    n_cages: int,
    models: Dict[str, Any],
    run_config: RunConfig,
    seed: int,
) -> PredictiveEnsemble:
    horizon = run_config.machine.planning_window
    realizations = run_config.prediction.realizations
    if model == "bayesian":
        config = run_config.update.model_copy(update={"seed": seed})
        chain = update_job(history, models["bayesian"], config, run_config.hyperpriors.n_regimes)
        return predict(chain, models["bayesian"], horizon, realizations, n_cages,
                       seed=stream(seed, "predict"), job_id=history.job_id)
    posterior = update_job_pragmatic(history, models["pragmatic"], run_config.pragmatic.independent_likelihood)
    return predict_pragmatic(posterior, models["pragmatic"], horizon, realizations, n_cages,
                             seed=stream(seed, "predict_pragmatic"), job_id=history.job_id)


def evaluate_mix(
    mix_index: int,
    mix: JobMix,
    corpus: Sequence[JobTemplate],
    models: Dict[str, Any],
    run_config: RunConfig,
    strategies: Sequence[str],
    seed: int = 0,
    job_budget: Optional[float] = None,
) -> Tuple[List[StrategyScore], Dict[str, CapPlan]]:
    """Plan caps with every strategy on one mix and score them against the true future"""
    machine = run_config.machine
    by_id = {t.template_id: t for t in corpus}
    total = None if job_budget is None else machine.baseline_w + machine.idle_cap_w * mix.n_idle + job_budget
    budget = Budget.from_machine(machine, mix.n_idle, total)
    counts = [j.n_cages for j in mix.running]
    futures = _futures(mix, by_id, machine)
    histories = [job_history(by_id[j.template_id], j, mix.minute, machine.history_censor_quantile) for j in mix.running]
    job_ids = [h.job_id for h in histories]

    ensembles: Dict[str, List[PredictiveEnsemble]] = {}
    needed = {"bayesian" for s in strategies if s.endswith("_B")} | {"pragmatic" for s in strategies if s.endswith("_P")}
    for model in sorted(needed):
        if model not in models:
            raise ConfigurationError(f"strategy needs a {model} model")
        ensembles[model] = [
            _ensemble_for(model, h, n, models, run_config, int(stream(seed, "mix", mix_index, "job", k).integers(2**31)))
            for k, (h, n) in enumerate(zip(histories, counts))
        ]

    scores, plans = [], {}
    for strategy in strategies:
        try:
            if strategy == "c_naive":
                plan = naive_caps(budget, counts, job_ids)
            else:
                objective = "weighted_mean" if strategy.startswith("c_avg") else "expected_max"
                model = "bayesian" if strategy.endswith("_B") else "pragmatic"
                plan = optimize_caps(ensembles[model], counts, budget, objective, machine.idle_power_w,
                                     run_config.optimizer, seed=stream(seed, "optimize", mix_index, strategy),
                                     job_ids=job_ids, strategy=strategy)
        except JobPowerException:
            logger.error("Strategy failed", mix=mix_index, strategy=strategy)
            raise
        realized = np.array([
            job_degradation(f, cap, machine.idle_power_w).relative_increase
            for f, cap in zip(futures, plan.caps)
        ])
        weights = np.asarray(counts, dtype=float)
        weighted = float(np.sum(weights * realized) / weights.sum()) if realized.size else 0.0
        scores.append(StrategyScore(mix_index, strategy, weighted, float(realized.max()) if realized.size else 0.0))
        plans[strategy] = plan
    return scores, plans


@monitor_performance
def evaluate_strategies(
    mixes: Sequence[JobMix],
    corpus: Sequence[JobTemplate],
    models: Dict[str, Any],
    run_config: RunConfig,
    strategies: Optional[Sequence[str]] = None,
    seed: int = 0,
    threads: Optional[int] = None,
    job_budget: Optional[float] = None,
) -> pd.DataFrame:
    """
    Score every strategy on every mix.

    Args:
        models: ``{"bayesian": FixedParent, "pragmatic": EmpiricalParent}``;
            only the models the strategies need are required
        job_budget: fixed job-area budget (W) in place of the machine's total

    Returns:
        DataFrame with columns mix, strategy, weighted_avg, max
    """
    strategies = list(strategies or run_config.strategies)
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ConfigurationError(f"unknown strategies {unknown}")
    workers = max(1, min(threads or run_config.threads or settings.THREADS, len(mixes) or 1))

    def run(item: Tuple[int, JobMix]) -> List[StrategyScore]:
        index, mix = item
        scores, _ = evaluate_mix(index, mix, corpus, models, run_config, strategies, seed, job_budget)
        logger.info("Mix evaluated", mix=index, jobs=len(mix.running),
                    **{s.strategy: round(s.weighted_avg, 5) for s in scores})
        return scores

    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(executor.map(run, enumerate(mixes)))

    rows = [
        {"mix": s.mix, "strategy": s.strategy, "weighted_avg": s.weighted_avg, "max": s.maximum}
        for scores in results for s in scores
    ]
    return pd.DataFrame(rows, columns=["mix", "strategy", "weighted_avg", "max"])


def win_rates(scores: pd.DataFrame, metric: str = "weighted_avg") -> pd.DataFrame:
    """Share of mixes where the row strategy scores lower than the column strategy (ties count half)"""
    table = scores.pivot(index="mix", columns="strategy", values=metric)
    names = list(table.columns)
    rates = pd.DataFrame(index=names, columns=names, dtype=float)
    for a in names:
        for b in names:
            rates.loc[a, b] = float(((table[a] < table[b]) + 0.5 * (table[a] == table[b])).mean())
    return rates


def summarize_scores(scores: pd.DataFrame) -> Dict[str, Dict[str, float]]:
    summary = {}
    for strategy, rows in scores.groupby("strategy", sort=True):
        summary[strategy] = {
            "mixes": int(len(rows)),
            "mean_weighted_avg": float(rows["weighted_avg"].mean()),
            "median_weighted_avg": float(rows["weighted_avg"].median()),
            "mean_max": float(rows["max"].mean()),
            "median_max": float(rows["max"].median()),
        }
    return summary
