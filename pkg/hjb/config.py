"""Experiment configuration: pydantic schemas, file loading and environment."""

import json
import logging
from os import getenv
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from hjb.errors import UsageError

logger = logging.getLogger(__name__)

SOLVER_BINARY_ENV = "HJBSOS_SDP_SOLVER"
BLOCK_THRESHOLD_ENV = "HJBSOS_BLOCK_THRESHOLD"


class SolverSettings(BaseModel):
    """Conic solver tolerances and backend routing."""

    model_config = ConfigDict(extra="forbid")

    backend: Literal["auto", "internal", "external"] = "auto"
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iterations: int = 200
    step_fraction: float = 0.98
    """Fraction of the distance to the cone boundary taken per step"""
    block_threshold: int = 250
    """Largest PSD block the in-repo solver takes under backend=auto"""
    binary: str | None = None
    """External SDPA-format solver, defaults to $HJBSOS_SDP_SOLVER or csdp"""
    accept_tol: float = 1e-6
    """Residual level at which a stalled solve is still accepted as inaccurate"""


class RegionSettings(BaseModel):
    """Defaults for the regional analysis programs."""

    model_config = ConfigDict(extra="forbid")

    epsilon: float = 1e-4
    m_degree: int = 1
    roa_exponent: int = 1
    lambda_degree: int = 2
    bisection_iterations: int = 30
    bisection_rel_tol: float = 1e-3
    samples_per_face: int = 100_000
    sos_boundary_bound: bool = False
    cloud_budget: int = 200_000
    rho_max: float = 1e3
    """Upper bisection bracket when the boundary gives none"""


class SimulationSettings(BaseModel):
    """Closed-loop simulation and sweep settings."""

    model_config = ConfigDict(extra="forbid")

    step: float = 1e-3
    horizon: float = 20.0
    epsilon: float = 0.05
    hold: float = 0.5
    renormalize: bool = True
    seed: int = 0
    starts: int = 100
    grid: int = 50
    axes: list[str] | None = None
    """Two state names spanned by a sweep; other coordinates stay at the goal"""
    x0: list[float] | None = None
    precheck_samples: int = 50


class CostOverrides(BaseModel):
    model_config = ConfigDict(extra="forbid")

    q_diag: list[float] | None = None
    r_diag: list[float] | None = None


class ExperimentConfig(BaseModel):
    """Everything one run of the CLI needs; dumped into every output bundle."""

    model_config = ConfigDict(extra="forbid")

    benchmark: Literal["pendulum", "cartpole", "quadrotor", "double_integrator", "pusher"] = "pendulum"
    kind: Literal["under", "over", "both"] = "under"
    degree_under: int = 2
    degree_over: int = 2
    multiplier_degree: int | None = None
    initial_controller: Literal["lqr", "under"] = "lqr"
    parameters: dict[str, float | bool | list[float]] = Field(default_factory=dict)
    """Physical parameter overrides passed to the benchmark constructor"""
    cost: CostOverrides = Field(default_factory=CostOverrides)
    X: dict[str, tuple[float, float]] | None = None
    """Box overrides for the objective region, by state name"""
    Xh: dict[str, tuple[float, float]] | None = None
    """Box overrides for the region where the HJB inequality is imposed"""
    solver: SolverSettings = Field(default_factory=SolverSettings)
    region: RegionSettings = Field(default_factory=RegionSettings)
    simulation: SimulationSettings = Field(default_factory=SimulationSettings)
    out: str = "out"

    @field_validator("degree_under", "degree_over")
    @classmethod
    def _even_degree(cls, degree: int) -> int:
        if degree < 2 or degree % 2:
            raise ValueError(f"value function degree must be even and at least 2, got {degree}")
        return degree


def apply_overrides(data: dict[str, Any], overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Set dotted keys (``solver.backend``) on raw config data and validate it; None values are skipped."""
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        target = data
        *parents, leaf = key.split(".")
        for part in parents:
            target = target.setdefault(part, {})
        target[leaf] = value
    return ExperimentConfig.model_validate(data)


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a JSON or YAML config and apply dotted-key overrides on top."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
        data = data or {}
    return apply_overrides(data, overrides)


def solver_binary(settings: SolverSettings) -> str:
    return settings.binary or getenv(SOLVER_BINARY_ENV, "csdp")


def block_threshold(settings: SolverSettings) -> int:
    value = getenv(BLOCK_THRESHOLD_ENV)
    return int(value) if value else settings.block_threshold
