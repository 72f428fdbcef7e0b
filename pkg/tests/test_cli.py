import json
import os

import numpy as np
import pandas as pd
import pytest

from jobpower.services.core_model import JobSeries
from jobpower.services.job_predictor import FixedParent, PredictiveEnsemble
from jobpower.services.machine_sim import load_reference_parent
from jobpower.services.trace_io import write_json, write_traces
from jobpower.utils.monitoring import monitor
from jobpower_cli import default_caps, main

SMALL = [
    "--set", "hyperpriors.n_regimes=3",
    "--set", "update.n_iterations=30",
    "--set", "update.burn_in=10",
    "--set", "prediction.realizations=100",
    "--set", "pragmatic.max_components=3",
    "--set", "pragmatic.em_restarts=1",
]


@pytest.fixture
def peaked_csv(tmp_path, peaked_trace):
    path = str(tmp_path / "peaked.csv")
    write_traces(path, [JobSeries("peaked", peaked_trace[None, :])])
    return path


@pytest.fixture
def reference_fixed_parent(tmp_path):
    path = str(tmp_path / "reference_fixed_parent.json")
    write_json(path, FixedParent.from_parent(load_reference_parent()).to_dict())
    return path


def run(tmp_path, *args):
    return main(["--output-dir", str(tmp_path), "--seed", "5", *args])


def test_default_caps():
    caps = default_caps(4000.0, 1000.0)
    assert caps[0] == 1100.0 and caps[-1] == 4000.0
    assert len(caps) == 30


def test_degradation_curve(tmp_path, peaked_csv):
    assert run(tmp_path, "degradation-curve", "--traces", peaked_csv, "--idle", "1000", "--caps", "3000,4000") == 0
    table = pd.read_csv(tmp_path / "degradation_peaked.csv")
    row = table[table["cap"] == 3000.0].iloc[0]
    assert row["delta_minutes"] == pytest.approx(1.0)
    assert row["mean"] == pytest.approx(0.1)


def test_missing_config_exits_with_configuration_code(tmp_path, peaked_csv):
    code = main(["--config", str(tmp_path / "missing.env"), "degradation-curve", "--traces", peaked_csv])
    assert code == 2


def test_bad_override_exits_with_configuration_code(tmp_path, peaked_csv):
    assert run(tmp_path, "--set", "machine.n_cages=zero", "degradation-curve", "--traces", peaked_csv) == 2


def test_malformed_traces_exit_with_data_code(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("job_id,cage_id,minute_index,watts\nj,0,0,lots\n")
    assert run(tmp_path, "degradation-curve", "--traces", str(path)) == 3


def test_generate_update_predict_is_reproducible(tmp_path, reference_fixed_parent):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert run(out, *SMALL, "generate", "--templates", "3") == 0
        corpus = str(out / "corpus.csv")
        assert os.path.isfile(out / "corpus_truth.json")
        assert run(out, *SMALL, "update-job", corpus, "--job-id", "job0001",
                   "--parent", reference_fixed_parent, "--history-minutes", "0") == 0
        assert run(out, *SMALL, "predict", str(out / "posterior_job0001.json"),
                   "--parent", reference_fixed_parent, "--horizon", "4") == 0
        outputs.append((out / "ensemble_job0001.csv").read_bytes())

    assert outputs[0] == outputs[1]
    ensemble = pd.read_csv(tmp_path / "first" / "ensemble_job0001.csv")
    assert len(ensemble) == 100 * 4
    assert (ensemble["watts"] >= 0).all()


def test_pragmatic_workflow(tmp_path):
    assert run(tmp_path, *SMALL, "generate", "--templates", "3") == 0
    corpus = str(tmp_path / "corpus.csv")
    assert run(tmp_path, *SMALL, "fit-pragmatic", corpus) == 0
    parent = str(tmp_path / "pragmatic_parent.json")
    assert run(tmp_path, *SMALL, "update-job", corpus, "--model", "pragmatic", "--parent", parent,
               "--history-minutes", "8", "--censor-quantile", "0.9") == 0
    with open(tmp_path / "posterior_job0000.json") as fh:
        posterior = json.load(fh)
    assert posterior["schema"] == "jobpower.pragmatic_posterior/1"
    assert sum(posterior["weights"]) == pytest.approx(1.0)
    assert run(tmp_path, *SMALL, "predict", str(tmp_path / "posterior_job0000.json"), "--parent", parent) == 0
    ensemble = pd.read_csv(tmp_path / "ensemble_job0000.csv")
    assert ensemble["minute"].min() == 8


def test_fit_parent_writes_outputs(tmp_path):
    assert run(tmp_path, "generate", "--templates", "2",
               "--set", "hyperpriors.n_regimes=3") == 0
    code = run(tmp_path,
               "--set", "hyperpriors.n_regimes=3",
               "--set", "hyperpriors.n_components=4",
               "--set", "mcmc.n_iterations=6",
               "--set", "mcmc.burn_in=2",
               "--set", "mcmc.n_chains=1",
               "--set", "mcmc.checkpoint_every=3",
               "--set", "parent_fit.n_components=3",
               "--set", "parent_fit.restarts=1",
               "--set", "parent_fit.tolerance=10.0",
               "fit-parent", str(tmp_path / "corpus.csv"), "--checkpoint-dir", str(tmp_path / "ckpt"))
    assert code == 0
    fixed = FixedParent.from_dict(json.loads((tmp_path / "fixed_parent.json").read_text()))
    assert fixed.weights.size == 3
    assert os.path.isfile(tmp_path / "ckpt" / "chain0.json")
    trace = pd.read_csv(tmp_path / "parent_trace.csv")
    assert trace["iteration"].tolist() == [2, 3, 4, 5]


FIT_SMALL = [
    "--set", "hyperpriors.n_regimes=3",
    "--set", "hyperpriors.n_components=4",
    "--set", "mcmc.burn_in=2",
    "--set", "mcmc.n_chains=1",
    "--set", "mcmc.checkpoint_every=3",
    "--set", "parent_fit.n_components=3",
    "--set", "parent_fit.restarts=1",
    "--set", "parent_fit.tolerance=10.0",
]


def test_fit_parent_resume_matches_straight_run(tmp_path):
    assert run(tmp_path, "generate", "--templates", "2", "--set", "hyperpriors.n_regimes=3") == 0
    corpus = str(tmp_path / "corpus.csv")
    straight, resumed = tmp_path / "straight", tmp_path / "resumed"

    assert run(straight, *FIT_SMALL, "--set", "mcmc.n_iterations=8", "fit-parent", corpus) == 0
    assert run(resumed, *FIT_SMALL, "--set", "mcmc.n_iterations=4", "fit-parent", corpus,
               "--checkpoint-dir", str(resumed / "ckpt")) == 0
    assert run(resumed, *FIT_SMALL, "--set", "mcmc.n_iterations=8", "fit-parent", corpus,
               "--checkpoint-dir", str(resumed / "ckpt"), "--resume") == 0

    for name in ("fixed_parent.json", "parent_trace.csv"):
        assert (straight / name).read_bytes() == (resumed / name).read_bytes()
    assert pd.read_csv(resumed / "parent_trace.csv")["iteration"].tolist() == [2, 3, 4, 5, 6, 7]


def test_optimize_caps_naive(tmp_path):
    rng = np.random.default_rng(3)
    frame = pd.concat([
        PredictiveEnsemble("wide", 3000.0 + rng.normal(0.0, 50.0, (20, 5)), n_cages=2).to_frame(),
        PredictiveEnsemble("narrow", 2000.0 + rng.normal(0.0, 50.0, (20, 5)), n_cages=1).to_frame(),
    ])
    path = str(tmp_path / "ensembles.csv")
    frame.to_csv(path, index=False)
    machine = ["--set", "machine.n_cages=8", "--set", "machine.total_power_w=20000", "--set", "machine.baseline_w=1000"]

    assert run(tmp_path, *machine, "optimize-caps", path, "--objective", "naive") == 0
    plan = json.loads((tmp_path / "cap_plan.json").read_text())
    assert [j["job_id"] for j in plan["jobs"]] == ["wide", "narrow"]
    assert plan["jobs"][0]["cap_watts"] == pytest.approx(13000.0 / 3.0)

    assert run(tmp_path, *machine, "optimize-caps", path, "--objective", "expected_max",
               "--out", str(tmp_path / "max_plan.json")) == 0
    plan = json.loads((tmp_path / "max_plan.json").read_text())
    caps = {j["job_id"]: (j["cap_watts"], j["n_cages"]) for j in plan["jobs"]}
    assert sum(cap * n for cap, n in caps.values()) == pytest.approx(13000.0)


def test_simulate_naive(tmp_path):
    code = run(tmp_path,
               "--set", "machine.n_cages=12",
               "--set", "machine.n_templates=6",
               "--set", "machine.steady_state_completed=5",
               "--set", "machine.total_power_w=60000",
               "--set", "machine.baseline_w=1000",
               "--set", "hyperpriors.n_regimes=3",
               "simulate", "--mixes", "2", "--strategies", "c_naive", "--demand-fraction", "0.8")
    assert code == 0
    scores = pd.read_csv(tmp_path / "scores.csv")
    assert scores["strategy"].tolist() == ["c_naive", "c_naive"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mixes"] == 2
    assert summary["job_budget_w"] > 0
    assert os.path.isfile(tmp_path / "win_rates_max.csv")
    assert os.path.isfile(tmp_path / "occupancy.csv")


def test_calibrate_pragmatic(tmp_path):
    assert run(tmp_path, *SMALL, "generate", "--templates", "6") == 0
    corpus = str(tmp_path / "corpus.csv")
    assert run(tmp_path, *SMALL, "fit-pragmatic", corpus) == 0
    code = run(tmp_path, *SMALL,
               "--set", "calibration.history_lengths=0,5",
               "--set", "calibration.realizations=50",
               "--set", "calibration.n_band_simulations=200",
               "calibrate", corpus, "--model", "pragmatic", "--parent", str(tmp_path / "pragmatic_parent.json"))
    assert code == 0
    table = pd.read_csv(tmp_path / "calibration.csv")
    assert table[["history_minutes", "target"]].values.tolist() == [[0, 0.005], [0, 0.02], [5, 0.005], [5, 0.02]]
    assert os.path.isfile(tmp_path / "zscores.csv")


def test_each_command_starts_with_a_fresh_monitor(tmp_path, peaked_csv):
    monitor.record_operation("stale", 1.0)
    assert run(tmp_path, "degradation-curve", "--traces", peaked_csv) == 0
    assert "stale" not in monitor.get_metrics()["operations"]
