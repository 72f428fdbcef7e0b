import numpy as np
import pytest

from jobpower.config.run_config import MachineConfig, OptimizerConfig
from jobpower.services.cap_optimizer import (
    Budget,
    degradation_objective,
    naive_caps,
    optimize_caps,
    reparameterize,
)
from jobpower.services.job_predictor import PredictiveEnsemble
from jobpower.utils.exceptions import ConfigurationError, DomainError
from jobpower.utils.rng import stream

IDLE = 1000.0


@pytest.fixture
def budget():
    return Budget(total=10000.0, baseline=1000.0, idle_cap=1200.0, n_cages_total=3, n_idle=1)


@pytest.fixture
def ensembles():
    rng = stream(1, "ensembles")
    return [
        PredictiveEnsemble("hot", rng.normal(4500.0, 300.0, (200, 5))),
        PredictiveEnsemble("cool", rng.normal(2500.0, 200.0, (200, 5))),
    ]


def grid_optimum(ensembles, budget, objective):
    best = np.inf
    for cap in np.arange(1011.0, budget.job_budget - 1010.0, 1.0):
        caps = np.array([cap, budget.job_budget - cap])
        best = min(best, degradation_objective(caps, ensembles, [1, 1], objective, IDLE))
    return best


class TestBudget:
    def test_job_budget(self, budget):
        assert budget.job_budget == 7800.0
        assert budget.cage_area_budget == 9000.0

    @pytest.mark.parametrize("kwargs", [
        dict(total=900.0, baseline=1000.0, idle_cap=1200.0, n_cages_total=3, n_idle=1),
        dict(total=10000.0, baseline=1000.0, idle_cap=1200.0, n_cages_total=3, n_idle=4),
        dict(total=3000.0, baseline=1000.0, idle_cap=1200.0, n_cages_total=3, n_idle=2),
    ])
    def test_infeasible_budgets(self, kwargs):
        with pytest.raises(ConfigurationError):
            Budget(**kwargs)

    def test_all_idle_machine_is_allowed(self):
        assert Budget(3000.0, 1000.0, 1000.0, 2, 2).job_budget == 0.0

    def test_from_machine(self):
        machine = MachineConfig()
        budget = Budget.from_machine(machine, n_idle=10)
        assert budget.job_budget == pytest.approx(575000.0 - 56500.0 - 12000.0)


class TestPlans:
    def test_naive_caps_split_evenly(self, budget):
        plan = naive_caps(budget, [1, 1], ["a", "b"])
        assert plan.caps == pytest.approx([3900.0, 3900.0])
        assert plan.strategy == "c_naive"
        assert plan.budget_error(budget) < 1e-12

    def test_naive_caps_without_jobs(self, budget):
        assert naive_caps(budget, []).caps.size == 0

    def test_reparameterize(self, budget):
        assert reparameterize([1.0, 2.0], budget, [1, 1]) == pytest.approx([2600.0, 5200.0])
        assert reparameterize([1.0, 1.0], budget, [2, 1]) == pytest.approx([2600.0, 2600.0])
        with pytest.raises(DomainError):
            reparameterize([1.0, -1.0], budget, [1, 1])

    def test_to_json(self, budget):
        data = naive_caps(budget, [2], ["solo"]).to_json()
        assert data["strategy"] == "c_naive"
        assert data["jobs"][0] == {"job_id": "solo", "cap_watts": 3900.0, "n_cages": 2,
                                   "strategy": "c_naive", "objective_estimate": None}


class TestObjectives:
    def test_weighted_mean_and_max(self):
        traces = np.array([[[3000.0, 1000.0]], [[1000.0, 1000.0]]])
        caps = np.array([2000.0, 2000.0])
        assert degradation_objective(caps, traces, [3, 1], "weighted_mean", IDLE) == pytest.approx(0.375)
        assert degradation_objective(caps, traces, [3, 1], "expected_max", IDLE) == pytest.approx(0.5)

    def test_unknown_objective(self, ensembles):
        with pytest.raises(DomainError):
            degradation_objective([2000.0, 2000.0], ensembles, [1, 1], "median", IDLE)

    def test_ensembles_must_align(self):
        with pytest.raises(DomainError):
            degradation_objective([2000.0, 2000.0], [np.ones((3, 5)), np.ones((4, 5))], [1, 1], "expected_max", IDLE)


class TestOptimizer:
    @pytest.mark.parametrize("objective", ["weighted_mean", "expected_max"])
    def test_matches_grid_search(self, ensembles, budget, objective):
        plan = optimize_caps(ensembles, [1, 1], budget, objective, IDLE,
                             OptimizerConfig(n_random_starts=2), seed=3, job_ids=["hot", "cool"])
        assert plan.budget_error(budget) < 1e-9
        assert plan.caps[0] > plan.caps[1]
        achieved = degradation_objective(plan.caps, ensembles, [1, 1], objective, IDLE)
        assert achieved <= grid_optimum(ensembles, budget, objective) * 1.005 + 1e-12

    @pytest.mark.parametrize("objective", ["weighted_mean", "expected_max"])
    def test_never_worse_than_naive(self, ensembles, budget, objective):
        plan = optimize_caps(ensembles, [1, 1], budget, objective, IDLE, seed=1)
        naive = naive_caps(budget, [1, 1])
        assert (degradation_objective(plan.caps, ensembles, [1, 1], objective, IDLE)
                <= degradation_objective(naive.caps, ensembles, [1, 1], objective, IDLE) + 1e-12)

    def test_single_job_takes_whole_budget(self, ensembles):
        budget = Budget(total=10000.0, baseline=1000.0, idle_cap=1200.0, n_cages_total=3, n_idle=0)
        plan = optimize_caps(ensembles[:1], [3], budget, "expected_max", IDLE)
        assert plan.caps == pytest.approx([3000.0])
        assert plan.evaluations == 1

    def test_budget_below_floor(self, ensembles):
        tight = Budget(total=4000.0, baseline=1000.0, idle_cap=1200.0, n_cages_total=3, n_idle=1)
        with pytest.raises(ConfigurationError):
            optimize_caps(ensembles, [1, 1], tight, "weighted_mean", IDLE)

    def test_unknown_objective(self, ensembles, budget):
        with pytest.raises(DomainError):
            optimize_caps(ensembles, [1, 1], budget, "median", IDLE)

    def test_strategy_names(self, ensembles, budget):
        assert optimize_caps(ensembles, [1, 1], budget, "weighted_mean", IDLE).strategy == "c_avg"
        assert optimize_caps(ensembles, [1, 1], budget, "expected_max", IDLE, strategy="c_max_B").strategy == "c_max_B"
