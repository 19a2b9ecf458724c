import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.constraints import bound_probability, interval_mask, moment_equality, moment_inequality, rectangular_bound
from core.densities import point_mass, uniform
from core.types import (ConditionalDensity, Constraint, ConstraintSet, DatasetCollection, Density, Grid,
                        SynthesisProblem)
from pipeline.estimation import histogram
from pipeline.targets import resolve_target, row_moments
from services.settings import ConstraintConfig, InitialStateConfig, RunConfig

logger = logging.getLogger(__name__)


def _row_values(spec: ConstraintConfig, moments: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    fields = {"target": spec.target, "lower": spec.lower, "upper": spec.upper}
    return {name: resolve_target(value, moments) for name, value in fields.items() if value is not None}


def build_constraints(spec: ConstraintConfig, grid: Grid, values: Dict[str, float]) -> List[Constraint]:
    """Concrete constraints of one template for one conditioning state."""
    if spec.kind == "moment_equality":
        return [moment_equality(spec.order, values["target"], grid)]
    if spec.kind == "moment_inequality":
        return [moment_inequality(spec.order, values["target"], grid, spec.sense)]
    if spec.kind == "rectangular_bound":
        return list(rectangular_bound(spec.order, values["lower"], values["upper"], grid))
    lower, upper = spec.subset
    return [bound_probability(interval_mask(grid, lower, upper), spec.epsilon)]


def stage_constraint_sets(specs: Sequence[ConstraintConfig], g_u: ConditionalDensity,
                          skip_flagged_rows: bool = True) -> Tuple[ConstraintSet, ...]:
    """One ConstraintSet per state row, targets resolved against that row of g_U."""
    moments = row_moments(g_u)
    resolved = [_row_values(spec, moments) for spec in specs]
    sets = []
    for i in range(g_u.cond_shape[0]):
        if skip_flagged_rows and g_u.flagged[i]:
            sets.append(ConstraintSet())
            continue
        constraints: List[Constraint] = []
        for spec, values in zip(specs, resolved):
            constraints.extend(build_constraints(spec, g_u.target, {k: float(v[i]) for k, v in values.items()}))
        sets.append(ConstraintSet(tuple(constraints)))
    return tuple(sets)


def initial_densities(cfg: InitialStateConfig, grid: Grid,
                      data: Optional[DatasetCollection] = None) -> Tuple[Density, Optional[Density]]:
    """Prior f_0 and optional reference prior g_0."""
    if cfg.kind == "point":
        x0 = point_mass(grid, cfg.value)
    elif cfg.kind == "uniform":
        x0 = uniform(grid)
    else:
        if data is None:
            raise ValueError("an empirical initial state needs trajectory data")
        first = np.array([t.x[0] for t in data.trajectories])
        joint, counts = histogram([first], [grid])
        if counts.dropped:
            logger.warning(f"⚠️ {counts.dropped} initial states outside the state grid were dropped")
        x0 = Density(grid, joint.mass)
    g0 = {"none": None, "uniform": uniform(grid), "same": x0}[cfg.reference_prior]
    return x0, g0


def build_problem(config: RunConfig, g_u: Sequence[ConditionalDensity], f_x: Sequence[ConditionalDensity],
                  g_x: Sequence[ConditionalDensity], x0: Density, g0: Optional[Density] = None) -> SynthesisProblem:
    """Assemble the synthesis problem with per-stage, per-state constraint sets."""
    constraints = tuple(
        stage_constraint_sets(config.constraints.for_stage(k), g_u[k - 1], config.constraints.skip_flagged_rows)
        for k in range(1, config.horizon + 1)
    )
    total = sum(len(cs) for stage in constraints for cs in stage)
    logger.info(f"📊 Problem: horizon {config.horizon}, {x0.grid.cells} states, "
                f"{g_u[0].target.cells} controls, {total} explicit constraints")
    return SynthesisProblem(
        horizon=config.horizon,
        f_x=tuple(f_x),
        g_x=tuple(g_x),
        g_u=tuple(g_u),
        constraints=constraints,
        x0=x0,
        g0=g0,
    )
