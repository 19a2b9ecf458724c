from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from .errors import NegativeMass, NonFiniteH, NotNormalized

# Tolerance for "sums to one" on every Density and every conditional row
MASS_TOL = 1e-12


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# Grid class: one axis of a rectangular discretization (midpoint rule)
@dataclass(frozen=True)
class Grid:
    lower: float
    upper: float
    cells: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"Grid lower bound {self.lower} must be below upper bound {self.upper}")
        if int(self.cells) != self.cells or self.cells < 2:
            raise ValueError(f"Grid needs at least 2 cells, got {self.cells}")
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        object.__setattr__(self, "cells", int(self.cells))

    @classmethod
    def from_centers(cls, first: float, last: float, cells: int) -> "Grid":
        """Grid whose first and last cell centers are `first` and `last`."""
        width = (last - first) / (cells - 1)
        return cls(first - width / 2.0, last + width / 2.0, cells)

    @property
    def width(self) -> float:
        return (self.upper - self.lower) / self.cells

    @cached_property
    def widths(self) -> np.ndarray:
        return _frozen_array(np.full(self.cells, self.width))

    @cached_property
    def centers(self) -> np.ndarray:
        return _frozen_array(self.lower + (np.arange(self.cells) + 0.5) * self.width)

    @cached_property
    def edges(self) -> np.ndarray:
        return _frozen_array(self.lower + np.arange(self.cells + 1) * self.width)

    def cell_index(self, values) -> np.ndarray:
        """Cell index of each value, -1 for values outside [lower, upper]."""
        values = np.asarray(values, dtype=float)
        idx = np.floor((values - self.lower) / self.width).astype(int)
        # the upper edge belongs to the last cell
        idx = np.where(values == self.upper, self.cells - 1, idx)
        inside = (values >= self.lower) & (values <= self.upper)
        return np.where(inside, idx, -1)

    def nearest_index(self, values) -> np.ndarray:
        """Index of the nearest cell center, clipped to the grid."""
        values = np.asarray(values, dtype=float)
        idx = np.rint((values - self.lower) / self.width - 0.5).astype(int)
        return np.clip(idx, 0, self.cells - 1)

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "cells": self.cells}

    @classmethod
    def from_dict(cls, data: dict) -> "Grid":
        return cls(data["lower"], data["upper"], data["cells"])


def _check_mass(mass: np.ndarray, where: str):
    if not np.all(np.isfinite(mass)):
        raise NotNormalized(f"{where}: mass contains non-finite entries")
    if np.any(mass < 0):
        raise NegativeMass(f"{where}: mass has negative entries")


# Density class: normalized mass vector over a 1-D grid
@dataclass(frozen=True, eq=False)
class Density:
    grid: Grid
    mass: np.ndarray

    def __post_init__(self):
        mass = _frozen_array(self.mass)
        if mass.shape != (self.grid.cells,):
            raise ValueError(f"Density mass shape {mass.shape} does not match grid of {self.grid.cells} cells")
        _check_mass(mass, "Density")
        total = float(mass.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise NotNormalized(f"Density mass sums to {total!r}, expected 1")
        object.__setattr__(self, "mass", mass)

    @property
    def support(self) -> np.ndarray:
        return self.mass > 0


# JointDensity class: normalized mass over the product of several grids
@dataclass(frozen=True, eq=False)
class JointDensity:
    grids: Tuple[Grid, ...]
    mass: np.ndarray

    def __post_init__(self):
        grids = tuple(self.grids)
        mass = _frozen_array(self.mass)
        shape = tuple(g.cells for g in grids)
        if mass.shape != shape:
            raise ValueError(f"JointDensity mass shape {mass.shape} does not match grids {shape}")
        _check_mass(mass, "JointDensity")
        total = float(mass.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise NotNormalized(f"JointDensity mass sums to {total!r}, expected 1")
        object.__setattr__(self, "grids", grids)
        object.__setattr__(self, "mass", mass)

    @property
    def ndim(self) -> int:
        return len(self.grids)


# ConditionalDensity class: one Density over `target` per cell of the `given` grids
@dataclass(frozen=True, eq=False)
class ConditionalDensity:
    given: Tuple[Grid, ...]
    target: Grid
    table: np.ndarray
    flagged: Optional[np.ndarray] = None  # rows filled uniform because their marginal was zero

    def __post_init__(self):
        given = tuple(self.given)
        table = _frozen_array(self.table)
        cond_shape = tuple(g.cells for g in given)
        if table.shape != cond_shape + (self.target.cells,):
            raise ValueError(f"Conditional table shape {table.shape} does not match {cond_shape} x {self.target.cells}")
        _check_mass(table, "ConditionalDensity")
        sums = table.sum(axis=-1)
        worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
        if worst > MASS_TOL:
            raise NotNormalized(f"ConditionalDensity rows deviate from 1 by up to {worst!r}")
        flagged = np.zeros(cond_shape, dtype=bool) if self.flagged is None else np.array(self.flagged, dtype=bool)
        if flagged.shape != cond_shape:
            raise ValueError("flagged mask must match the conditioning shape")
        flagged.setflags(write=False)
        object.__setattr__(self, "given", given)
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "flagged", flagged)

    @property
    def cond_shape(self) -> Tuple[int, ...]:
        return tuple(g.cells for g in self.given)

    def row(self, *index: int) -> Density:
        return Density(self.target, self.table[tuple(index)])


class ConstraintKind(str, Enum):
    EQUALITY = "equality"
    INEQUALITY = "inequality"


# Constraint class: c[f] = E_f[h] - target, "= 0" or "<= 0"
@dataclass(frozen=True, eq=False)
class Constraint:
    h: np.ndarray
    target: float
    kind: ConstraintKind
    label: str = ""
    # cells allowed to carry mass; set only by probability bounds with epsilon = 0
    support: Optional[np.ndarray] = None

    def __post_init__(self):
        h = _frozen_array(self.h)
        if h.ndim != 1:
            raise ValueError("constraint functional must be tabulated on a 1-D grid")
        if not np.all(np.isfinite(h)):
            raise NonFiniteH(f"constraint '{self.label}' has non-finite h values")
        if not np.isfinite(self.target):
            raise NonFiniteH(f"constraint '{self.label}' has a non-finite target")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "target", float(self.target))
        object.__setattr__(self, "kind", ConstraintKind(self.kind))
        if self.support is not None:
            object.__setattr__(self, "support", _frozen_array(self.support, dtype=bool))

    @property
    def is_equality(self) -> bool:
        return self.kind is ConstraintKind.EQUALITY


# ConstraintSet class: equalities first (indices 1..n_e), then inequalities
@dataclass(frozen=True, eq=False)
class ConstraintSet:
    constraints: Tuple[Constraint, ...] = ()

    def __post_init__(self):
        items = tuple(self.constraints)
        ordered = tuple(c for c in items if c.is_equality) + tuple(c for c in items if not c.is_equality)
        sizes = {c.h.shape for c in ordered}
        if len(sizes) > 1:
            raise ValueError(f"constraints tabulated on different grids: {sizes}")
        object.__setattr__(self, "constraints", ordered)

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    @property
    def n_e(self) -> int:
        return sum(1 for c in self.constraints if c.is_equality)

    @property
    def n_l(self) -> int:
        return len(self.constraints) - self.n_e

    @property
    def equality_indices(self) -> Tuple[int, ...]:
        return tuple(range(1, self.n_e + 1))

    @property
    def inequality_indices(self) -> Tuple[int, ...]:
        return tuple(range(self.n_e + 1, len(self.constraints) + 1))

    @property
    def targets(self) -> np.ndarray:
        return np.array([c.target for c in self.constraints], dtype=float)

    def support_mask(self, cells: int) -> Optional[np.ndarray]:
        """Cells allowed by the hard support restrictions, None if there are none."""
        masks = [c.support for c in self.constraints if c.support is not None]
        if not masks:
            return None
        mask = np.ones(cells, dtype=bool)
        for m in masks:
            mask &= m
        return mask


# TiltSpec class: reference g, cost tilt alpha and constraints of one projection
@dataclass(frozen=True, eq=False)
class TiltSpec:
    g: Density
    alpha: np.ndarray
    constraints: ConstraintSet = field(default_factory=ConstraintSet)

    def __post_init__(self):
        alpha = _frozen_array(np.broadcast_to(np.asarray(self.alpha, dtype=float), self.g.mass.shape))
        if not np.all(np.isfinite(alpha[self.g.mass > 0])):
            raise ValueError("tilt alpha must be finite wherever g has mass")
        object.__setattr__(self, "alpha", alpha)


# DualSolution class: multipliers (lambda_0 first), active set and diagnostics
@dataclass(frozen=True, eq=False)
class DualSolution:
    lam: np.ndarray
    active: Tuple[int, ...]
    value: float
    converged: bool
    iterations: int
    grad_norm: float = 0.0

    @property
    def lambda0(self) -> float:
        return float(self.lam[0])


# ProjectionResult class: optimal density, duals and primal minimum
@dataclass(frozen=True, eq=False)
class ProjectionResult:
    f_star: Density
    dual: DualSolution
    minimum: float


# SolverSettings class: tolerances shared by projection and synthesis
@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-9
    max_iterations: int = 50_000
    armijo_sigma: float = 1e-4
    backtrack: float = 0.5
    active_tol: float = 1e-6
    slater_tol: float = 1e-8
    check_feasibility: bool = True
    support_floor: float = 0.0
    workers: int = 1
    allow_unconverged: bool = False


# StageCache class: the per-stage tables of the backward recursion
@dataclass(frozen=True, eq=False)
class StageCache:
    stage: int
    alpha_hat: np.ndarray  # (controls, states)
    beta_hat: np.ndarray  # (controls, states)
    omega_hat: np.ndarray  # alpha_hat + beta_hat
    ln_gamma: np.ndarray  # (states,), carried to stage - 1
    duals: Tuple[DualSolution, ...]


# Policy class: one control conditional per stage, stage k stored at index k - 1
@dataclass(frozen=True, eq=False)
class Policy:
    stages: Tuple[ConditionalDensity, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def horizon(self) -> int:
        return len(self.stages)

    def stage(self, k: int) -> ConditionalDensity:
        if not 1 <= k <= len(self.stages):
            raise IndexError(f"stage {k} outside 1..{len(self.stages)}")
        return self.stages[k - 1]


# SynthesisProblem class: everything Algorithm-style backward recursion needs
@dataclass(frozen=True, eq=False)
class SynthesisProblem:
    horizon: int
    f_x: Tuple[ConditionalDensity, ...]  # f(x_k | u_k, x_{k-1}), given = (control, state)
    g_x: Tuple[ConditionalDensity, ...]
    g_u: Tuple[ConditionalDensity, ...]  # g(u_k | x_{k-1}), given = (state,)
    constraints: Tuple[Tuple[ConstraintSet, ...], ...]  # [stage][state]
    x0: Density
    g0: Optional[Density] = None

    def __post_init__(self):
        for name in ("f_x", "g_x", "g_u", "constraints"):
            value = tuple(getattr(self, name))
            if len(value) != self.horizon:
                raise ValueError(f"{name} has {len(value)} stages, horizon is {self.horizon}")
            object.__setattr__(self, name, value)
        state, control = self.state_grid, self.control_grid
        for k in range(self.horizon):
            for trans in (self.f_x[k], self.g_x[k]):
                if trans.given != (control, state) or trans.target != state:
                    raise ValueError(f"stage {k + 1}: transition grids are inconsistent")
            if self.g_u[k].given != (state,) or self.g_u[k].target != control:
                raise ValueError(f"stage {k + 1}: example policy grids are inconsistent")
            if len(self.constraints[k]) != state.cells:
                raise ValueError(f"stage {k + 1}: need one constraint set per state cell")
        if self.x0.grid != state or (self.g0 is not None and self.g0.grid != state):
            raise ValueError("initial densities must live on the state grid")

    @property
    def state_grid(self) -> Grid:
        return self.x0.grid

    @property
    def control_grid(self) -> Grid:
        return self.g_u[0].target


# SynthesisReport class: minima B*_k, state marginals and diagnostics
@dataclass(frozen=True, eq=False)
class SynthesisReport:
    b_star: np.ndarray  # B*_k for k = 1..n at index k - 1
    state_marginals: Tuple[Density, ...]  # p_X^0 .. p_X^n
    duals: Tuple[Tuple[DualSolution, ...], ...]  # [stage][state]
    unconverged: Tuple[Tuple[int, int], ...] = ()
    flagged_rows: Tuple[Tuple[int, int], ...] = ()
    stages: Tuple[StageCache, ...] = ()
    closed_loop_kl: float = float("nan")


# Trajectory class: one drive, samples ordered by stage index
@dataclass(frozen=True, eq=False)
class Trajectory:
    id: str
    k: np.ndarray
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        k = _frozen_array(self.k, dtype=int)
        x = _frozen_array(self.x)
        u = _frozen_array(self.u)
        if not (k.shape == x.shape == u.shape) or k.ndim != 1:
            raise ValueError(f"trajectory {self.id}: k, x, u must be equal-length vectors")
        if np.any(np.diff(k) <= 0):
            raise ValueError(f"trajectory {self.id}: stage indices must be strictly increasing")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError(f"trajectory {self.id}: non-finite samples")
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    def __len__(self) -> int:
        return int(self.k.size)


# DatasetCollection class: trajectories of one role (complete or example)
@dataclass(frozen=True, eq=False)
class DatasetCollection:
    trajectories: Tuple[Trajectory, ...]
    role: str = "complete"

    def __post_init__(self):
        trajectories = tuple(sorted(self.trajectories, key=lambda t: t.id))
        if not trajectories:
            raise ValueError("a dataset collection needs at least one trajectory")
        if self.role not in ("complete", "example"):
            raise ValueError(f"unknown dataset role '{self.role}'")
        object.__setattr__(self, "trajectories", trajectories)

    @property
    def sample_count(self) -> int:
        return sum(len(t) for t in self.trajectories)


# GaussianTransition class: x_k ~ Normal(a x_{k-1} + b u_k, sigma2)
@dataclass(frozen=True)
class GaussianTransition:
    a: float
    b: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")


# SampleCounts class: histogram bookkeeping reported by empirical_joint
@dataclass(frozen=True)
class SampleCounts:
    in_range: int
    dropped: int


class ControlMode(str, Enum):
    MEAN = "mean"
    SAMPLE = "sample"


# RolloutConfig class: closed-loop simulation settings
@dataclass(frozen=True, eq=False)
class RolloutConfig:
    horizon: int
    rollouts: int
    control_mode: ControlMode
    seed: int
    x0: Density
    workers: int = 1

    def __post_init__(self):
        if self.horizon < 1 or self.rollouts < 1:
            raise ValueError("horizon and rollout count must be at least 1")
        object.__setattr__(self, "control_mode", ControlMode(self.control_mode))


# BandStatistics class: per-stage mean and standard deviation of x and u
@dataclass(frozen=True, eq=False)
class BandStatistics:
    mean_x: np.ndarray
    std_x: np.ndarray
    mean_u: np.ndarray
    std_u: np.ndarray


# RolloutResult class: per-rollout paths (rows) over stages 1..n (columns)
@dataclass(frozen=True, eq=False)
class RolloutResult:
    x0: np.ndarray
    x: np.ndarray
    u: np.ndarray
    clip_count: int = 0
    bands: Optional[BandStatistics] = None

    @property
    def horizon(self) -> int:
        return int(self.x.shape[1])
