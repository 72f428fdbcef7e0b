"""
Degradation bound of a power cap.

Capping a job at C with per-cage idle power I delays it by at most

    delta = sum_t max(P(t) - C, 0) / (C - I)      (minutes, 1-minute grid)

and its relative slowdown is delta / T for a trace of T minutes.
"""

from dataclasses import dataclass, field
from typing import Dict, Sequence, Union

import numpy as np
import pandas as pd

from jobpower.utils.exceptions import DomainError

BISECTION_TOL_W = 0.1
DEFAULT_QUANTILES = (0.025, 0.975)

TraceLike = Union[Sequence[float], np.ndarray, "PredictiveEnsemble"]


@dataclass
class DegradationBound:
    """Bound for one trace, or mean and quantiles over an ensemble of traces"""

    delta_minutes: float
    relative_increase: float
    quantiles: Dict[float, float] = field(default_factory=dict)
    realizations: int = 1


def _as_traces(trace: TraceLike) -> np.ndarray:
    watts = getattr(trace, "cage_watts", trace)
    watts = np.atleast_2d(np.asarray(watts, dtype=float))
    if watts.shape[1] == 0:
        raise DomainError("degradation needs a nonempty trace")
    return watts


def _check_cap(cap, idle: float) -> None:
    if np.any(np.asarray(cap) <= idle):
        raise DomainError(f"cap must exceed idle power {idle} W")


def excess_delta(traces: np.ndarray, cap, idle: float) -> np.ndarray:
    """
    Delay bound in minutes per row of ``traces``.

    ``cap`` may be a scalar or broadcast against the leading axes of ``traces``.
    """
    cap = np.asarray(cap, dtype=float)
    _check_cap(cap, idle)
    over = np.maximum(traces - cap[..., None], 0.0).sum(axis=-1)
    return over / (cap - idle)


def degradation_bound(trace, cap: float, idle: float) -> DegradationBound:
    """Delay bound and relative increase of a single trace under cap C"""
    watts = np.asarray(trace, dtype=float).ravel()
    if watts.size == 0:
        raise DomainError("degradation needs a nonempty trace")
    delta = float(excess_delta(watts, cap, idle))
    return DegradationBound(delta_minutes=delta, relative_increase=delta / watts.size)


def job_degradation(cage_traces, cap: float, idle: float) -> DegradationBound:
    """A multi-cage job runs at the pace of its slowest cage"""
    traces = _as_traces(cage_traces)
    deltas = excess_delta(traces, cap, idle)
    worst = float(deltas.max())
    return DegradationBound(delta_minutes=worst, relative_increase=worst / traces.shape[1])


def expected_degradation(
    ensemble: TraceLike,
    cap: float,
    idle: float,
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
) -> DegradationBound:
    """Mean and quantiles of the relative increase over realizations"""
    traces = _as_traces(ensemble)
    rel = excess_delta(traces, cap, idle) / traces.shape[1]
    return DegradationBound(
        delta_minutes=float(rel.mean() * traces.shape[1]),
        relative_increase=float(rel.mean()),
        quantiles={float(q): float(np.quantile(rel, q)) for q in quantiles},
        realizations=traces.shape[0],
    )


def cap_for_target(trace: TraceLike, idle: float, target: float) -> float:
    """
    Smallest cap (to 0.1 W) whose mean relative increase is at most ``target``.

    The bound is nonincreasing in C, so bisection between I and the trace
    maximum is exact up to the tolerance. Target 0 returns the maximum.
    """
    if target < 0:
        raise DomainError("target relative increase must be nonnegative")
    traces = _as_traces(trace)
    peak = float(traces.max())
    if peak <= idle:
        return idle + BISECTION_TOL_W

    def mean_rel(cap: float) -> float:
        return float(excess_delta(traces, cap, idle).mean() / traces.shape[1])

    lo, hi = float(idle), peak
    while hi - lo > BISECTION_TOL_W:
        mid = 0.5 * (lo + hi)
        if mean_rel(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def degradation_curve(
    trace: TraceLike,
    caps: Sequence[float],
    idle: float,
    quantiles: Sequence[float] = DEFAULT_QUANTILES,
) -> pd.DataFrame:
    """Cap-vs-degradation table: one row per cap, mean and quantiles of relative increase"""
    traces = _as_traces(trace)
    rows = []
    for cap in caps:
        bound = expected_degradation(traces, cap, idle, quantiles)
        row = {"cap": float(cap), "delta_minutes": bound.delta_minutes, "mean": bound.relative_increase}
        for q, value in bound.quantiles.items():
            row[f"q{100 * q:g}"] = value
        rows.append(row)
    return pd.DataFrame(rows)
