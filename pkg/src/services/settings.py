import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.errors import ConfigError
from core.types import ControlMode, GaussianTransition, Grid, SolverSettings

logger = logging.getLogger(__name__)

Expression = Union[float, str]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AxisConfig(_Section):
    lower: float
    upper: float
    cells: int = Field(ge=2)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.lower < self.upper:
            raise ValueError(f"lower ({self.lower}) must be below upper ({self.upper})")
        return self

    def to_grid(self) -> Grid:
        return Grid(self.lower, self.upper, self.cells)


class GridConfig(_Section):
    state: AxisConfig
    control: AxisConfig


class ConstraintConfig(_Section):
    """One constraint template; string targets are expressions in mean_of_g, var_of_g, std_of_g."""
    kind: Literal["moment_equality", "moment_inequality", "rectangular_bound", "bound_probability"]
    order: int = Field(1, ge=1)
    target: Optional[Expression] = None
    sense: Literal["<=", ">="] = "<="
    lower: Optional[Expression] = None
    upper: Optional[Expression] = None
    subset: Optional[Tuple[float, float]] = None
    epsilon: float = Field(0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _fields_for_kind(self):
        if self.kind in ("moment_equality", "moment_inequality") and self.target is None:
            raise ValueError(f"{self.kind} needs a target")
        if self.kind == "rectangular_bound" and (self.lower is None or self.upper is None):
            raise ValueError("rectangular_bound needs lower and upper")
        if self.kind == "bound_probability" and self.subset is None:
            raise ValueError("bound_probability needs a subset [lower, upper]")
        return self


class ConstraintsConfig(_Section):
    default: List[ConstraintConfig] = Field(default_factory=list)
    stages: Dict[int, List[ConstraintConfig]] = Field(default_factory=dict)
    skip_flagged_rows: bool = True

    def for_stage(self, k: int) -> List[ConstraintConfig]:
        return self.stages.get(k, self.default)


class TransitionConfig(_Section):
    a: float
    b: float
    sigma2: float = Field(gt=0.0)

    def to_model(self) -> GaussianTransition:
        return GaussianTransition(self.a, self.b, self.sigma2)


class TransitionsConfig(_Section):
    reference: Dict[Literal["complete", "example"], TransitionConfig] = Field(default_factory=dict)


class EstimationConfig(_Section):
    per_stage: bool = False
    support_floor: float = Field(0.0, ge=0.0)
    example_policy_form: Literal["empirical", "maxent"] = "empirical"
    transition_source: Literal["reference", "fitted", "empirical"] = "reference"


class InitialStateConfig(_Section):
    kind: Literal["point", "uniform", "empirical"] = "point"
    value: Optional[float] = None
    reference_prior: Literal["none", "uniform", "same"] = "none"

    @model_validator(mode="after")
    def _point_needs_value(self):
        if self.kind == "point" and self.value is None:
            raise ValueError("a point initial state needs a value")
        return self


class SolverConfig(_Section):
    tolerance: float = Field(1e-9, gt=0.0)
    max_iterations: int = Field(50_000, ge=1)
    armijo_sigma: float = Field(1e-4, gt=0.0, lt=1.0)
    backtrack: float = Field(0.5, gt=0.0, lt=1.0)
    active_tol: float = Field(1e-6, gt=0.0)
    slater_tol: float = Field(1e-8, gt=0.0)
    workers: int = Field(1, ge=1)
    check_feasibility: bool = True
    allow_unconverged: bool = False

    def to_settings(self, support_floor: float = 0.0, workers: Optional[int] = None) -> SolverSettings:
        return SolverSettings(
            tolerance=self.tolerance,
            max_iterations=self.max_iterations,
            armijo_sigma=self.armijo_sigma,
            backtrack=self.backtrack,
            active_tol=self.active_tol,
            slater_tol=self.slater_tol,
            check_feasibility=self.check_feasibility,
            support_floor=support_floor,
            workers=workers or self.workers,
            allow_unconverged=self.allow_unconverged,
        )


class SimulationConfig(_Section):
    rollouts: int = Field(1000, ge=1)
    control_mode: ControlMode = ControlMode.MEAN
    transition: Literal["discrete", "gaussian"] = "discrete"
    seed: int = Field(0, ge=0)
    export_paths: bool = False
    workers: int = Field(1, ge=1)


class SyntheticConfig(_Section):
    complete_drives: int = Field(100, ge=1)
    example_drives: int = Field(20, ge=1)
    x0: Tuple[float, float] = (0.0, 10.0)
    cruise_speed: float = 14.0
    dip: float = 6.0
    junction: float = 60.0
    width: float = 20.0
    complete_speed_noise: float = Field(2.0, ge=0.0)
    example_speed_noise: float = Field(0.8, ge=0.0)
    complete: TransitionConfig = TransitionConfig(a=0.9820, b=0.2591, sigma2=2.6118)
    example: TransitionConfig = TransitionConfig(a=0.9811, b=0.2723, sigma2=1.7622)
    seed: int = Field(7, ge=0)


class PathsConfig(_Section):
    complete: List[Path] = Field(default_factory=lambda: [Path("data/complete.csv")])
    example: List[Path] = Field(default_factory=lambda: [Path("data/example.csv")])
    artifacts: Path = Path("artifacts")


class ArtifactsConfig(_Section):
    stamp: bool = False


class LoggingConfig(_Section):
    level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"
    file: Optional[Path] = Path("logs/policysmith.log")


class RunConfig(_Section):
    grid: GridConfig
    horizon: int = Field(ge=1)
    constraints: ConstraintsConfig = Field(default_factory=ConstraintsConfig)
    estimation: EstimationConfig = Field(default_factory=EstimationConfig)
    transitions: TransitionsConfig = Field(default_factory=TransitionsConfig)
    initial_state: InitialStateConfig = Field(default_factory=lambda: InitialStateConfig(kind="uniform"))
    solver: SolverConfig = Field(default_factory=SolverConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    artifacts: ArtifactsConfig = Field(default_factory=ArtifactsConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="after")
    def _reference_models(self):
        if self.estimation.transition_source == "reference":
            missing = {"complete", "example"} - set(self.transitions.reference)
            if missing:
                raise ValueError(f"transition_source 'reference' needs transitions.reference.{sorted(missing)}")
        bad = [k for k in self.constraints.stages if not 1 <= k <= self.horizon]
        if bad:
            raise ValueError(f"constraint overrides for stages {bad} outside 1..{self.horizon}")
        return self

    def resolve_paths(self, base: Path) -> "RunConfig":
        """Make every relative path absolute against `base`."""
        def fix(p: Path) -> Path:
            return p if p.is_absolute() else (base / p).resolve()

        self.paths.complete = [fix(p) for p in self.paths.complete]
        self.paths.example = [fix(p) for p in self.paths.example]
        self.paths.artifacts = fix(self.paths.artifacts)
        if self.logging.file is not None:
            self.logging.file = fix(self.logging.file)
        return self


def load_config(path: Union[str, Path] = "config/config.yaml") -> RunConfig:
    """Read the YAML run configuration, apply environment overrides and validate it.

    Relative paths are resolved against the directory holding the config
    file. POLICYSMITH_ARTIFACTS_DIR and POLICYSMITH_LOG_LEVEL (also read
    from a .env file) override the corresponding entries.
    """
    path = Path(path)
    load_dotenv()
    try:
        with open(path, "r", encoding="utf-8") as file:
            raw = yaml.safe_load(file) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e

    if os.getenv("POLICYSMITH_ARTIFACTS_DIR"):
        raw.setdefault("paths", {})["artifacts"] = os.environ["POLICYSMITH_ARTIFACTS_DIR"]
    if os.getenv("POLICYSMITH_LOG_LEVEL"):
        raw.setdefault("logging", {})["level"] = os.environ["POLICYSMITH_LOG_LEVEL"].upper()

    try:
        config = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e
    return config.resolve_paths(path.parent.resolve())
