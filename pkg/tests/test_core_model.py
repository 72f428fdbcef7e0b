import numpy as np
import pytest
from scipy.stats import chisquare, geom

from jobpower.config.run_config import HyperPriors
from jobpower.services.core_model import (
    JobParams,
    JobSeries,
    ParentParams,
    PowerSample,
    inverse_stick_break,
    log_stationary_from_rates,
    pi_from_v,
    sample_job_from_parent,
    sample_parent_from_hyperpriors,
    simulate_forward,
    simulate_job,
    simulate_paths,
    stationary_distribution,
    stick_break,
    transition_matrix,
)
from jobpower.utils.exceptions import DataFormatError, DomainError
from jobpower.utils.rng import stream
from tests.conftest import make_job


class TestStickBreaking:
    def test_weights(self):
        assert stick_break([0.5, 0.5, 0.5]) == pytest.approx([0.5, 0.25, 0.125, 0.125])

    def test_weights_sum_to_one(self):
        w = stick_break(np.full(9, 0.3))
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.all(w > 0)

    def test_inverse_recovers_fractions(self):
        f = np.array([0.2, 0.7, 0.4])
        assert inverse_stick_break(stick_break(f)) == pytest.approx(f)

    @pytest.mark.parametrize("bad", [[0.0, 0.5], [0.5, 1.0], [1.2], []])
    def test_rejects_fractions_outside_unit_interval(self, bad):
        with pytest.raises(DomainError):
            stick_break(bad)

    def test_single_regime_lands_on_itself(self):
        assert pi_from_v([0.3]) == pytest.approx([1.0])

    def test_last_fraction_is_unused(self):
        assert pi_from_v([0.5, 0.9]) == pytest.approx(pi_from_v([0.5, 0.1]))


class TestTransitions:
    def test_rows_sum_to_one(self):
        tpm = transition_matrix([0.2, 0.5, 0.9], [0.3, 0.3, 0.4])
        assert tpm.sum(axis=1) == pytest.approx(np.ones(3))

    def test_sticky_diagonal(self):
        tpm = transition_matrix([0.2, 0.5], [0.3, 0.7])
        assert tpm[0, 0] == pytest.approx(0.8 + 0.2 * 0.3)
        assert tpm[1, 0] == pytest.approx(0.5 * 0.3)

    def test_stationary_proportional_to_pi_over_lambda(self):
        lam, pi = np.array([0.2, 0.5]), np.array([0.3, 0.7])
        expected = np.array([1.5, 1.4]) / 2.9
        assert stationary_distribution(transition_matrix(lam, pi)) == pytest.approx(expected)
        assert np.exp(log_stationary_from_rates(lam, pi)) == pytest.approx(expected)

    def test_stationary_is_invariant(self):
        tpm = transition_matrix([0.1, 0.3, 0.05], [0.2, 0.5, 0.3])
        s = stationary_distribution(tpm)
        assert s @ tpm == pytest.approx(s)

    def test_rate_outside_unit_interval(self):
        with pytest.raises(DomainError):
            transition_matrix([1.5, 0.2], [0.5, 0.5])


class TestJobSeries:
    def test_negative_watts_rejected(self):
        with pytest.raises(DataFormatError):
            JobSeries("j", [[100.0, -1.0]])

    def test_censored_reading_must_equal_cap(self):
        with pytest.raises(DataFormatError):
            JobSeries("j", [[100.0, 200.0]], caps=[[np.nan, 150.0]])

    def test_censor_at(self):
        series = JobSeries("j", [[1000.0, 4000.0, 2999.0]]).censor_at(3000.0)
        assert series.watts[0].tolist() == [1000.0, 3000.0, 2999.0]
        assert series.censored[0].tolist() == [False, True, False]
        assert series.has_censoring

    def test_censor_at_quantile_on_empty_history(self):
        empty = JobSeries.empty("j", n_cages=2)
        assert empty.censor_at_quantile(0.95) is empty
        assert empty.n_cages == 2 and empty.length == 0

    def test_window_keeps_minute_offsets(self):
        series = JobSeries("j", np.arange(10.0).reshape(1, 10), start_minute=100)
        window = series.window(3, 6)
        assert window.watts[0].tolist() == [3.0, 4.0, 5.0]
        assert window.start_minute == 103
        assert series.head(50).length == 10

    def test_from_samples_requires_contiguous_minutes(self):
        rep = [PowerSample(0, 10.0), PowerSample(2, 11.0)]
        with pytest.raises(DataFormatError):
            JobSeries.from_samples("j", [rep])

    def test_from_samples_and_back(self):
        reps = [[PowerSample(5, 10.0), PowerSample(6, 20.0, censored_at=20.0)],
                [PowerSample(5, 12.0), PowerSample(6, 13.0)]]
        series = JobSeries.from_samples("j", reps)
        assert series.start_minute == 5
        assert series.censored.tolist() == [[False, True], [False, False]]
        assert series.replicates() == reps

    def test_power_sample_validation(self):
        with pytest.raises(DomainError):
            PowerSample(0, 10.0, censored_at=12.0)


class TestParameters:
    def test_job_validation(self):
        job = make_job(5)
        job.validate()
        job.lam = np.array([0.0, 0.5])
        with pytest.raises(DomainError):
            job.validate()

    def test_tail_keeps_last_minutes(self):
        job = make_job(6)
        job.z = np.arange(6.0).reshape(1, 6)
        assert job.tail(2).z.tolist() == [[4.0, 5.0]]
        assert job.length == 6

    def test_job_dict_preserves_paths(self):
        job = make_job(4, n_replicates=2)
        job.xi[1, 2] = 1
        job.phi[1, 2] = True
        restored = JobParams.from_dict(job.to_dict())
        assert np.array_equal(restored.xi, job.xi)
        assert np.array_equal(restored.phi, job.phi)

    def test_parent_from_dict_validates(self, reference_parent):
        data = reference_parent.to_dict()
        data["tau2"] = -1.0
        with pytest.raises(DomainError):
            ParentParams.from_dict(data)
        del data["tau2"]
        with pytest.raises(DataFormatError):
            ParentParams.from_dict(data)

    def test_reference_parent_weights(self, reference_parent):
        assert reference_parent.omega == pytest.approx([0.1, 0.3, 0.4, 0.2])


class TestSimulation:
    def test_simulate_job_shape_and_floor(self, reference_parent):
        params = sample_job_from_parent(reference_parent, seed=2, n_regimes=5)
        series = simulate_job(params, reference_parent, length=50, n_replicates=3, seed=1, job_id="x")
        assert series.watts.shape == (3, 50)
        assert np.all(series.watts >= 0)
        assert series.job_id == "x"

    def test_simulate_job_is_reproducible(self, reference_parent):
        params = sample_job_from_parent(reference_parent, seed=2, n_regimes=5)
        a = simulate_job(params, reference_parent, 30, seed=9)
        b = simulate_job(params, reference_parent, 30, seed=9)
        assert np.array_equal(a.watts, b.watts)

    def test_first_regime_follows_stationary_law(self):
        job = make_job(0, lam=(0.2, 0.5), v=(0.3, 0.5))
        xi, phi, _, _ = simulate_paths(job, 1.0, 1, 20000, stream(5, "test"))
        expected = stationary_distribution(job.tpm)
        assert np.mean(xi[:, 0] == 0) == pytest.approx(expected[0], abs=0.02)
        assert not phi.any()

    def test_zero_rates_never_move(self):
        xi, phi, _, _ = simulate_forward(
            np.zeros(3), [0.2, 0.3, 0.5], [0.0, 1.0, 2.0], 1.0, 0.5, 1.0,
            xi0=np.array([2, 0, 1]), z0=0.0, horizon=20, rng=stream(1, "test"),
        )
        assert np.all(xi == np.array([2, 0, 1])[:, None])
        assert not phi.any()

    def test_residual_keeps_marginal_variance(self):
        _, _, z, _ = simulate_forward(
            [0.1], [1.0], [0.0], 4.0, 0.3, 1.0,
            xi0=np.zeros(20000, dtype=int), z0=2.0 * stream(2, "z0").standard_normal(20000),
            horizon=5, rng=stream(3, "test"),
        )
        assert np.var(z[:, -1]) == pytest.approx(4.0, rel=0.05)

    def test_residence_times_are_geometric(self):
        job = make_job(0, lam=(0.2, 0.5), v=(0.6, 0.5))
        xi, _, _, _ = simulate_paths(job, 1.0, 2000, 20, stream(4, "residence"))
        runs = []
        for path in xi:
            edges = np.flatnonzero(np.diff(path)) + 1
            for start, stop in zip(edges[:-1], edges[1:]):
                if path[start] == 0:
                    runs.append(stop - start)
        runs = np.array(runs)
        leave = 0.2 * (1.0 - job.pi[0])
        cutoff = 40
        observed = np.append(np.bincount(runs, minlength=cutoff + 1)[1:cutoff], np.sum(runs >= cutoff))
        probs = geom.pmf(np.arange(1, cutoff), leave)
        expected = runs.size * np.append(probs, geom.sf(cutoff - 1, leave))
        assert chisquare(observed, expected).pvalue > 1e-3

    def test_sample_job_from_parent(self, reference_parent):
        job = sample_job_from_parent(reference_parent, seed=1, n_regimes=10, length=20, n_replicates=2)
        job.validate()
        assert job.xi.shape == (2, 20)
        assert not job.phi[:, 0].any()
        assert np.all((job.psi >= 0) & (job.psi < reference_parent.n_components))
        assert np.all(job.phi[:, 1:][job.xi[:, 1:] != job.xi[:, :-1]])

    def test_sample_parent_from_hyperpriors(self):
        hypers = HyperPriors(n_components=6)
        parent = sample_parent_from_hyperpriors(hypers, seed=4)
        parent.validate()
        assert parent.n_components == 6
        assert parent.omega.sum() == pytest.approx(1.0)
