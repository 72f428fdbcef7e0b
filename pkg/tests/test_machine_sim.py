import numpy as np
import pandas as pd
import pytest

from jobpower.config.run_config import (
    HyperPriors,
    MachineConfig,
    OptimizerConfig,
    PredictionConfig,
    PragmaticConfig,
    RunConfig,
    UpdateConfig,
)
from jobpower.services.cap_optimizer import Budget, naive_caps
from jobpower.services.core_model import JobSeries
from jobpower.services.job_predictor import FixedParent
from jobpower.services.machine_sim import (
    JobTemplate,
    _truncated_geometric,
    budget_for_demand_fraction,
    enforced_machine_power,
    evaluate_strategies,
    generate_corpus,
    job_history,
    job_window,
    run_queue_to_steady_state,
    sample_mixes,
    summarize_scores,
    uncapped_job_demand,
    validate_corpus,
    win_rates,
)
from jobpower.services.pragmatic_estimator import fit_empirical_parent
from jobpower.utils.exceptions import ConfigurationError, DataFormatError
from jobpower.utils.rng import stream


def flat_template(template_id, n_cages, duration, watts=2000.0):
    return JobTemplate(template_id, JobSeries(template_id, np.full((n_cages, duration), watts)))


@pytest.fixture
def small_machine():
    return MachineConfig(n_cages=8, total_power_w=40000.0, baseline_w=2000.0, steady_state_completed=30)


@pytest.fixture
def corpus(reference_parent):
    return generate_corpus(12, reference_parent, seed=1, n_regimes=3, min_duration=10, max_duration=40, max_cages=4)


class TestCorpus:
    def test_ranges(self, reference_parent):
        templates = generate_corpus(30, reference_parent, seed=2, n_regimes=4, max_duration=60)
        assert [t.template_id for t in templates[:2]] == ["job0000", "job0001"]
        for t in templates:
            assert 10 <= t.duration <= 60
            assert 1 <= t.n_cages <= 12
            assert np.all(t.trace.watts >= 0.0)
            assert t.params.xi.shape == t.trace.watts.shape

    def test_reproducible(self, reference_parent):
        a = generate_corpus(5, reference_parent, seed=3, max_duration=30)
        b = generate_corpus(5, reference_parent, seed=3, max_duration=30)
        for x, y in zip(a, b):
            assert np.array_equal(x.trace.watts, y.trace.watts)

    def test_truncated_geometric(self):
        rng = stream(4, "geom")
        draws = np.array([_truncated_geometric(rng, 0.45, 12) for _ in range(20000)])
        assert draws.min() >= 1 and draws.max() <= 12
        assert np.mean(draws == 1) == pytest.approx(0.45 / (1.0 - 0.55 ** 12), abs=0.01)

    def test_validate_corpus(self):
        with pytest.raises(DataFormatError):
            validate_corpus([], 8)
        with pytest.raises(DataFormatError):
            validate_corpus([flat_template("wide", 9, 5)], 8)


class TestQueue:
    def test_steady_state_invariants(self, corpus, small_machine):
        mix = run_queue_to_steady_state(corpus, small_machine, seed=5)
        by_id = {t.template_id: t for t in corpus}
        cages = [c for job in mix.running for c in job.cage_ids]
        assert len(cages) == len(set(cages))
        assert mix.busy_cages <= small_machine.n_cages
        assert mix.completed >= small_machine.steady_state_completed
        for job in mix.running:
            assert job.start_minute <= mix.minute < job.start_minute + by_id[job.template_id].duration
        frame = mix.occupancy_frame()
        assert list(frame.columns) == ["minute", "running_jobs", "busy_cages"]
        assert frame["busy_cages"].max() <= small_machine.n_cages

    def test_head_of_line_blocking(self, small_machine):
        corpus = [flat_template("whole", 8, 7), flat_template("single", 1, 3)]
        mix = run_queue_to_steady_state(corpus, small_machine, seed=6)
        head = {t.template_id: t for t in corpus}[mix.queue[0]]
        assert head.n_cages > mix.n_idle

    def test_mixes_are_reproducible(self, corpus, small_machine):
        first = sample_mixes(corpus, small_machine, seed=7, n_mixes=2)
        second = sample_mixes(corpus, small_machine, seed=7, n_mixes=2)
        assert [m.minute for m in first] == [m.minute for m in second]
        assert [[j.template_id for j in m.running] for m in first] == [[j.template_id for j in m.running] for m in second]


class TestPower:
    def test_job_window_pads_with_idle(self):
        template = JobTemplate("t", JobSeries("t", [[10.0, 20.0, 30.0]]))
        assert job_window(template, 2, 5, 1000.0).tolist() == [[30.0, 1000.0, 1000.0]]

    def test_job_history_is_censored_and_named(self, corpus, small_machine):
        mix = run_queue_to_steady_state(corpus, small_machine, seed=5)
        by_id = {t.template_id: t for t in corpus}
        job = mix.running[0]
        history = job_history(by_id[job.template_id], job, mix.minute, 0.95)
        assert history.job_id == f"{job.template_id}@{job.start_minute}"
        assert history.length == mix.minute - job.start_minute
        assert history.n_cages == job.n_cages

    def test_enforced_power_within_budget(self, corpus, small_machine):
        mix = run_queue_to_steady_state(corpus, small_machine, seed=5)
        budget = Budget.from_machine(small_machine, mix.n_idle)
        plan = naive_caps(budget, [j.n_cages for j in mix.running])
        power = enforced_machine_power(mix, plan, corpus, small_machine)
        assert power.shape == (small_machine.planning_window,)
        assert np.all(power <= small_machine.total_power_w + 1e-6)

    def test_demand_fraction_scales(self, corpus, small_machine):
        mixes = sample_mixes(corpus, small_machine, seed=8, n_mixes=2)
        full = budget_for_demand_fraction(mixes, corpus, small_machine, 1.0)
        assert budget_for_demand_fraction(mixes, corpus, small_machine, 0.5) == pytest.approx(0.5 * full)
        assert full == pytest.approx(np.mean([uncapped_job_demand(m, corpus, small_machine).mean() for m in mixes]))


def small_run_config():
    return RunConfig(
        seed=1,
        threads=2,
        hyperpriors=HyperPriors(n_regimes=3),
        update=UpdateConfig(n_iterations=20, burn_in=10),
        prediction=PredictionConfig(realizations=50),
        pragmatic=PragmaticConfig(max_components=3, em_restarts=1),
        machine=MachineConfig(n_cages=8, total_power_w=40000.0, baseline_w=2000.0, steady_state_completed=15),
        optimizer=OptimizerConfig(n_random_starts=0, max_evaluations=200),
    )


class TestStrategies:
    def test_every_strategy_scores_every_mix(self, corpus, reference_parent):
        run_config = small_run_config()
        mixes = sample_mixes(corpus, run_config.machine, seed=9, n_mixes=2)
        models = {
            "bayesian": FixedParent.from_parent(reference_parent),
            "pragmatic": fit_empirical_parent([t.trace for t in corpus[:4]], run_config.pragmatic),
        }
        job_budget = budget_for_demand_fraction(mixes, corpus, run_config.machine, 0.9)
        scores = evaluate_strategies(mixes, corpus, models, run_config, seed=2, job_budget=job_budget)
        assert list(scores.columns) == ["mix", "strategy", "weighted_avg", "max"]
        assert len(scores) == 2 * 5
        assert np.all(scores["weighted_avg"] >= 0.0)
        assert np.all(scores["max"] >= scores["weighted_avg"] - 1e-12)

        summary = summarize_scores(scores)
        assert set(summary) == set(run_config.strategies)
        assert summary["c_naive"]["mixes"] == 2

    def test_missing_model(self, corpus):
        run_config = small_run_config()
        mixes = sample_mixes(corpus, run_config.machine, seed=9, n_mixes=1)
        with pytest.raises(ConfigurationError):
            evaluate_strategies(mixes, corpus, {}, run_config, strategies=["c_avg_B"])

    def test_unknown_strategy(self, corpus):
        run_config = small_run_config()
        with pytest.raises(ConfigurationError):
            evaluate_strategies([], corpus, {}, run_config, strategies=["c_best"])

    def test_naive_only_needs_no_model(self, corpus):
        run_config = small_run_config()
        mixes = sample_mixes(corpus, run_config.machine, seed=9, n_mixes=2)
        scores = evaluate_strategies(mixes, corpus, {}, run_config, strategies=["c_naive"], threads=1)
        assert scores["strategy"].tolist() == ["c_naive", "c_naive"]


def test_win_rates():
    scores = pd.DataFrame({
        "mix": [0, 0, 1, 1],
        "strategy": ["a", "b", "a", "b"],
        "weighted_avg": [0.1, 0.2, 0.3, 0.3],
        "max": [0.0, 0.0, 0.0, 0.0],
    })
    rates = win_rates(scores)
    assert rates.loc["a", "b"] == pytest.approx(0.75)
    assert rates.loc["b", "a"] == pytest.approx(0.25)
    assert rates.loc["a", "a"] == pytest.approx(0.5)
    assert win_rates(scores, "max").loc["a", "b"] == pytest.approx(0.5)


@pytest.mark.slow
def test_strategy_ordering(reference_parent):
    machine = MachineConfig(n_cages=24, total_power_w=120000.0, baseline_w=5000.0, steady_state_completed=40)
    run_config = RunConfig(
        seed=3,
        threads=4,
        hyperpriors=HyperPriors(n_regimes=3),
        update=UpdateConfig(n_iterations=120, burn_in=60),
        prediction=PredictionConfig(realizations=200),
        pragmatic=PragmaticConfig(max_components=3, em_restarts=1),
        machine=machine,
        optimizer=OptimizerConfig(n_random_starts=1, max_evaluations=1500),
    )
    corpus = generate_corpus(40, reference_parent, seed=3, n_regimes=3, min_duration=20, max_duration=80,
                             max_cages=4)
    mixes = sample_mixes(corpus, machine, seed=4, n_mixes=20)
    models = {
        "bayesian": FixedParent.from_parent(reference_parent),
        "pragmatic": fit_empirical_parent([t.trace for t in corpus], run_config.pragmatic),
    }
    job_budget = budget_for_demand_fraction(mixes, corpus, machine, 0.7)
    scores = evaluate_strategies(mixes, corpus, models, run_config,
                                 strategies=["c_naive", "c_avg_B", "c_max_B", "c_avg_P"], seed=5,
                                 job_budget=job_budget)

    rates = win_rates(scores)
    assert rates.loc["c_avg_B", "c_naive"] >= 0.8
    assert rates.loc["c_avg_P", "c_naive"] >= 0.8
    summary = summarize_scores(scores)
    assert summary["c_max_B"]["mean_max"] <= summary["c_avg_B"]["mean_max"]
    assert summary["c_avg_B"]["mean_weighted_avg"] <= summary["c_max_B"]["mean_weighted_avg"]
