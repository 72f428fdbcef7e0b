"""Run configuration: hyperpriors, sampler, machine and optimizer sections.

A run configuration file is a ``KEY=VALUE`` file whose dotted keys address the
nested sections below, for example::

    seed=42
    hyperpriors.n_regimes=10
    mcmc.n_iterations=5000
    machine.total_power_w=575000
    strategies=c_avg_B,c_max_B,c_naive
"""

import os
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from jobpower.config.settings import settings
from jobpower.utils.exceptions import ConfigurationError

STRATEGIES = ["c_avg_B", "c_max_B", "c_avg_P", "c_max_P", "c_naive"]


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class HyperPriors(_Section):
    """Fixed constants of the parent prior, plus truncation levels"""

    m_sigma: float = Field(4.0, description="prior mean of mu_sigma")
    s2_sigma: float = Field(1.0, gt=0, description="prior variance of mu_sigma")
    a_sigma: float = Field(10.0, gt=0, description="IG shape for sigma2_sigma")
    b_sigma: float = Field(5.0, gt=0, description="IG rate for sigma2_sigma")
    m_rho: float = Field(-2.0, description="prior mean of mu_rho")
    s2_rho: float = Field(9.0, gt=0, description="prior variance of mu_rho")
    a_rho: float = Field(10.0, gt=0, description="IG shape for sigma2_rho")
    b_rho: float = Field(5.0, gt=0, description="IG rate for sigma2_rho")
    a_gamma: float = Field(1.0, gt=0, description="Gamma shape for gamma")
    b_gamma: float = Field(1.0, gt=0, description="Gamma rate for gamma")
    m_nu: float = Field(2000.0, description="prior mean of mixture means (W)")
    s2_nu: float = Field(1.0e6, gt=0, description="prior variance of mixture means (W^2)")
    a_varsigma: float = Field(1.0, gt=0, description="IG shape for mixture variances")
    b_varsigma: float = Field(1.0, gt=0, description="IG rate for mixture variances")
    a_lambda: float = Field(1.0, gt=0, description="Gamma shape for alpha_lambda")
    b_lambda: float = Field(1.0, gt=0, description="Gamma rate for alpha_lambda")
    c_lambda: float = Field(1.0, gt=0, description="Gamma shape for beta_lambda")
    d_lambda: float = Field(1.0, gt=0, description="Gamma rate for beta_lambda")
    a_delta: float = Field(1.0, gt=0, description="Gamma shape for delta")
    b_delta: float = Field(1.0, gt=0, description="Gamma rate for delta")
    a_tau: float = Field(10.0, gt=0, description="IG shape for tau2")
    b_tau: float = Field(10.0, gt=0, description="IG rate for tau2")
    n_regimes: int = Field(10, ge=2, description="job-level truncation K")
    n_components: int = Field(20, ge=2, description="parent mixture truncation M")


class McmcConfig(_Section):
    """Sampler length, chains and proposal scales"""

    n_iterations: int = Field(10000, ge=1)
    burn_in: int = Field(2000, ge=0)
    n_chains: int = Field(5, ge=1)
    thin: int = Field(1, ge=1)
    rho_rw_scale: float = Field(0.25, gt=0, description="variance of the log-rho random walk")
    alpha_lambda_rw_scale: float = Field(0.01, gt=0)
    beta_lambda_rw_scale: float = Field(0.01, gt=0)
    sigma2_rw_scale: float = Field(0.25, gt=0, description="log-sigma2 random walk fallback")
    seed: int = 0
    keep_paths: bool = Field(False, description="store full xi/phi/z paths in every sample")
    progress_every: int = Field(500, ge=1)
    checkpoint_every: int = Field(0, ge=0, description="0 disables periodic checkpoints")

    @model_validator(mode="after")
    def _burn_in_before_end(self) -> "McmcConfig":
        if self.burn_in >= self.n_iterations:
            raise ValueError("burn_in must be smaller than n_iterations")
        return self


class UpdateConfig(McmcConfig):
    """Single-job updating against a fixed parent"""

    n_iterations: int = Field(2000, ge=1)
    burn_in: int = Field(500, ge=0)
    n_chains: int = Field(1, ge=1)


class ParentFitConfig(_Section):
    """Mixture approximation of the regime-mean parent density"""

    n_components: int = Field(10, ge=1)
    grid_points: int = Field(512, ge=16)
    restarts: int = Field(5, ge=1)
    tolerance: float = Field(0.05, gt=0, description="relative L2 residual accepted")


class PredictionConfig(_Section):
    horizon: int = Field(5, ge=1, description="minutes predicted")
    realizations: int = Field(1000, ge=1)


class PragmaticConfig(_Section):
    max_components: int = Field(10, ge=1)
    min_samples: int = Field(10, ge=1)
    em_restarts: int = Field(3, ge=1)
    independent_likelihood: bool = Field(False, description="ignore AR(1) residual dependence")


class MachineConfig(_Section):
    """Simulated machine and queue"""

    n_cages: int = Field(154, ge=1)
    total_power_w: float = Field(575000.0, gt=0)
    baseline_w: float = Field(56500.0, ge=0)
    idle_cap_w: float = Field(1200.0, ge=0, description="cap assigned to each idle cage")
    idle_power_w: float = Field(1000.0, ge=0, description="per-cage idle draw I")
    planning_window: int = Field(5, ge=1, description="minutes between cap decisions")
    steady_state_completed: int = Field(1000, ge=1)
    history_censor_quantile: Optional[float] = Field(0.95, gt=0, le=1)
    n_mixes: int = Field(100, ge=1)
    n_templates: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _budget_feasible(self) -> "MachineConfig":
        if self.total_power_w <= self.baseline_w:
            raise ValueError("total_power_w must exceed baseline_w")
        if self.idle_cap_w < self.idle_power_w:
            raise ValueError("idle_cap_w must be at least idle_power_w")
        return self


class OptimizerConfig(_Section):
    """Multi-start Nelder-Mead settings"""

    n_random_starts: int = Field(4, ge=0)
    start_spread: float = Field(0.3, gt=0, description="sd of random log-scale starts")
    max_evaluations: int = Field(4000, ge=10)
    xatol: float = Field(1e-4, gt=0)
    fatol: float = Field(1e-7, gt=0)
    floor_margin_w: float = Field(10.0, gt=0, description="caps kept above I + margin")


class CalibrationConfig(_Section):
    history_lengths: List[int] = Field(default_factory=lambda: [0, 30, 200])
    targets: List[float] = Field(default_factory=lambda: [0.005, 0.02])
    censor_quantile: float = Field(0.95, gt=0, le=1)
    horizon: int = Field(5, ge=1)
    realizations: int = Field(1000, ge=2)
    level: float = Field(0.95, gt=0, lt=1)
    n_band_simulations: int = Field(2000, ge=100)

    split_lists = field_validator("history_lengths", "targets", mode="before")(_split_list)


class RunConfig(_Section):
    """Complete configuration of a workbench run"""

    seed: int = Field(default_factory=lambda: settings.SEED)
    threads: Optional[int] = Field(None, ge=1, description="defaults to JOBPOWER_THREADS")
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)
    strategies: List[str] = Field(default_factory=lambda: list(STRATEGIES))
    hyperpriors: HyperPriors = Field(default_factory=HyperPriors)
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    update: UpdateConfig = Field(default_factory=UpdateConfig)
    parent_fit: ParentFitConfig = Field(default_factory=ParentFitConfig)
    prediction: PredictionConfig = Field(default_factory=PredictionConfig)
    pragmatic: PragmaticConfig = Field(default_factory=PragmaticConfig)
    machine: MachineConfig = Field(default_factory=MachineConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)

    split_lists = field_validator("strategies", mode="before")(_split_list)

    @field_validator("strategies")
    @classmethod
    def _known_strategies(cls, value: List[str]) -> List[str]:
        if value == ["all"]:
            return list(STRATEGIES)
        unknown = [s for s in value if s not in STRATEGIES]
        if unknown:
            raise ValueError(f"unknown strategies {unknown}; choose from {STRATEGIES}")
        return value


def _nest(flat: Dict[str, Optional[str]]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            raise ConfigurationError(f"Missing value for key '{key}'")
        parts = key.strip().split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"Key '{key}' conflicts with scalar '{part}'")
            node = child
        node[parts[-1]] = value
    return nested


def build_run_config(values: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Validate a (possibly nested) mapping into a RunConfig"""
    try:
        return RunConfig.model_validate(values or {})
    except ValidationError as e:
        errors = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"Invalid run configuration: {errors}") from e


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Load a KEY=VALUE run configuration file, then apply dotted-key overrides.

    Args:
        path: configuration file, or None for all defaults
        overrides: dotted keys (e.g. ``{"seed": 7}``) applied after the file

    Returns:
        Validated RunConfig
    """
    flat: Dict[str, Any] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigurationError(f"Configuration file not found: {path}")
        try:
            flat.update(dotenv_values(path))
        except OSError as e:
            raise ConfigurationError(f"Cannot read configuration file {path}: {e}") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    return build_run_config(_nest(flat))
