import numpy as np
import pytest

from jobpower.services.degradation import (
    cap_for_target,
    degradation_bound,
    degradation_curve,
    expected_degradation,
    job_degradation,
)
from jobpower.services.job_predictor import PredictiveEnsemble
from jobpower.utils.exceptions import DomainError


def test_two_minutes_over_the_cap(peaked_trace):
    bound = degradation_bound(peaked_trace, cap=3000.0, idle=1000.0)
    assert bound.delta_minutes == pytest.approx(1.0)
    assert bound.relative_increase == pytest.approx(0.1)


def test_cap_above_peak_costs_nothing(peaked_trace):
    assert degradation_bound(peaked_trace, cap=4000.0, idle=1000.0).delta_minutes == 0.0


@pytest.mark.parametrize("cap", [1000.0, 500.0])
def test_cap_at_or_below_idle(peaked_trace, cap):
    with pytest.raises(DomainError):
        degradation_bound(peaked_trace, cap=cap, idle=1000.0)


def test_empty_trace():
    with pytest.raises(DomainError):
        degradation_bound([], cap=2000.0, idle=1000.0)


def test_multi_cage_job_takes_slowest_cage(peaked_trace):
    cages = np.vstack([peaked_trace, np.full(10, 1500.0)])
    bound = job_degradation(cages, cap=3000.0, idle=1000.0)
    assert bound.delta_minutes == pytest.approx(1.0)


def test_ensemble_mean_and_quantiles(peaked_trace):
    ensemble = PredictiveEnsemble("j", np.vstack([peaked_trace, np.full(10, 1000.0)]))
    bound = expected_degradation(ensemble, cap=3000.0, idle=1000.0)
    assert bound.relative_increase == pytest.approx(0.05)
    assert bound.realizations == 2
    assert bound.quantiles[0.025] == pytest.approx(0.0025)


def test_curve_is_nonincreasing(peaked_trace):
    curve = degradation_curve(peaked_trace, np.arange(1100.0, 4100.0, 100.0), idle=1000.0)
    assert list(curve.columns) == ["cap", "delta_minutes", "mean", "q2.5", "q97.5"]
    assert np.all(np.diff(curve["mean"]) <= 1e-12)
    assert curve["mean"].iloc[-1] == 0.0


def test_cap_for_target(peaked_trace):
    assert cap_for_target(peaked_trace, idle=1000.0, target=0.1) == pytest.approx(3000.0, abs=0.1)
    assert cap_for_target(peaked_trace, idle=1000.0, target=0.0) == pytest.approx(4000.0, abs=0.1)
    with pytest.raises(DomainError):
        cap_for_target(peaked_trace, idle=1000.0, target=-0.1)


def test_cap_for_target_on_idle_trace():
    assert cap_for_target(np.full(5, 900.0), idle=1000.0, target=0.01) > 1000.0
