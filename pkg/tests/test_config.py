import pytest

from jobpower.config.run_config import (
    STRATEGIES,
    CalibrationConfig,
    McmcConfig,
    build_run_config,
    load_run_config,
)
from jobpower.config.settings import Settings
from jobpower.utils.exceptions import ConfigurationError


def write_config(tmp_path, text):
    path = tmp_path / "run.env"
    path.write_text(text)
    return str(path)


class TestRunConfig:
    def test_defaults(self):
        config = load_run_config()
        assert config.hyperpriors.n_regimes == 10
        assert config.hyperpriors.n_components == 20
        assert config.mcmc.n_iterations == 10000
        assert config.update.n_chains == 1
        assert config.machine.n_cages == 154
        assert config.machine.total_power_w == 575000.0
        assert config.strategies == STRATEGIES

    def test_file_then_overrides(self, tmp_path):
        path = write_config(tmp_path, "\n".join([
            "# small run",
            "seed=11",
            "hyperpriors.n_regimes=4",
            "mcmc.n_iterations=300",
            "mcmc.burn_in=100",
            "mcmc.keep_paths=true",
            "strategies=c_avg_B, c_naive",
            "calibration.history_lengths=0,10",
        ]) + "\n")
        config = load_run_config(path, {"seed": 7, "machine.n_cages": "12", "threads": None})
        assert config.seed == 7
        assert config.hyperpriors.n_regimes == 4
        assert config.mcmc.n_iterations == 300
        assert config.mcmc.keep_paths is True
        assert config.strategies == ["c_avg_B", "c_naive"]
        assert config.calibration.history_lengths == [0, 10]
        assert config.machine.n_cages == 12
        assert config.threads is None

    def test_all_strategies(self):
        assert build_run_config({"strategies": "all"}).strategies == STRATEGIES

    def test_unknown_strategy(self):
        with pytest.raises(ConfigurationError, match="c_best"):
            build_run_config({"strategies": "c_naive,c_best"})

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="n_regime"):
            load_run_config(overrides={"hyperpriors.n_regime": "4"})

    def test_burn_in_must_end_before_run(self):
        with pytest.raises(ConfigurationError, match="burn_in"):
            load_run_config(overrides={"update.n_iterations": "100"})
        with pytest.raises(ValueError):
            McmcConfig(n_iterations=10, burn_in=10)

    def test_infeasible_machine(self):
        with pytest.raises(ConfigurationError, match="baseline_w"):
            load_run_config(overrides={"machine.total_power_w": "1000", "machine.baseline_w": "2000"})

    def test_scalar_and_section_conflict(self):
        with pytest.raises(ConfigurationError, match="conflicts"):
            load_run_config(overrides={"seed": "1", "seed.value": "2"})

    def test_key_without_value(self, tmp_path):
        with pytest.raises(ConfigurationError, match="Missing value"):
            load_run_config(write_config(tmp_path, "seed=3\nthreads\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_run_config(str(tmp_path / "absent.env"))

    def test_sections_are_frozen(self):
        config = load_run_config()
        with pytest.raises(Exception):
            config.machine.n_cages = 3

    def test_calibration_lists(self):
        config = CalibrationConfig(history_lengths="5, 50", targets="0.01")
        assert config.history_lengths == [5, 50]
        assert config.targets == [0.01]


class TestSettings:
    def test_defaults_validate(self, monkeypatch):
        monkeypatch.setattr(Settings, "LOG_LEVEL", "info")
        monkeypatch.setattr(Settings, "LOG_FORMAT", "json")
        monkeypatch.setattr(Settings, "THREADS", 2)
        Settings.validate()

    @pytest.mark.parametrize("name,value", [
        ("LOG_LEVEL", "LOUD"),
        ("LOG_FORMAT", "xml"),
        ("THREADS", 0),
    ])
    def test_invalid(self, monkeypatch, name, value):
        monkeypatch.setattr(Settings, "LOG_LEVEL", "INFO")
        monkeypatch.setattr(Settings, "LOG_FORMAT", "console")
        monkeypatch.setattr(Settings, "THREADS", 1)
        monkeypatch.setattr(Settings, name, value)
        with pytest.raises(ConfigurationError):
            Settings.validate()
