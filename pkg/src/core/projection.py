"""Constrained KL projection: min KL(f || g) + E_f[alpha] under expectation constraints.

The optimum is the tilted density g exp(-alpha - <lam*, h>) / exp(1 + lam*_0),
with the explicit multipliers found on the reduced dual and lambda_0 fixed
by normalization.
"""
import logging
from typing import Optional

import numpy as np

from . import dual_solver
from .constraints import active_indices, allowed_cells, max_slack
from .densities import uniform
from .errors import DegenerateSupport, InfeasibleConstraints, NotConverged
from .types import ConstraintSet, Density, DualSolution, Grid, ProjectionResult, SolverSettings, TiltSpec

logger = logging.getLogger(__name__)

# largest exponent passed to exp before the result would overflow
_MAX_EXPONENT = 700.0


def _h_matrix(cs: ConstraintSet, cells: int) -> np.ndarray:
    if len(cs) == 0:
        return np.zeros((0, cells))
    return np.vstack([c.h for c in cs])


def _soft_mask(cs: ConstraintSet) -> np.ndarray:
    """Constraints handled by multipliers (support restrictions are not)."""
    return np.array([c.support is None for c in cs], dtype=bool)


def tilted_density(spec: TiltSpec, lam) -> np.ndarray:
    """Unnormalized g exp(-(1 + alpha + lam_0 + sum_j lam_j h_j)), lam_0 first."""
    lam = np.asarray(lam, dtype=float)
    cs = spec.constraints
    if lam.shape != (len(cs) + 1,):
        raise ValueError(f"expected {len(cs) + 1} multipliers, got {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise ValueError("multipliers must be finite")
    allowed = allowed_cells(cs, spec.g)
    h = _h_matrix(cs, spec.g.grid.cells)
    exponent = -(1.0 + spec.alpha + lam[0] + lam[1:] @ h)
    out = np.zeros(spec.g.grid.cells)
    clipped = np.minimum(exponent[allowed], _MAX_EXPONENT)
    if np.any(clipped < exponent[allowed]):
        logger.warning("⚠️ tilted density exponent clipped to avoid overflow")
    out[allowed] = spec.g.mass[allowed] * np.exp(clipped)
    return out


def dual_value(spec: TiltSpec, lam) -> float:
    """Full Lagrange dual -<lam, H> - sum tilted density, with H_0 = 1."""
    lam = np.asarray(lam, dtype=float)
    targets = np.concatenate([[1.0], spec.constraints.targets])
    return float(-lam @ targets - tilted_density(spec, lam).sum())


def _reduced_terms(spec: TiltSpec):
    allowed = allowed_cells(spec.constraints, spec.g)
    if not allowed.any():
        raise DegenerateSupport("no cell carries reference mass after support restrictions")
    soft = _soft_mask(spec.constraints)
    h = _h_matrix(spec.constraints, spec.g.grid.cells)[soft][:, allowed]
    log_ref = np.log(spec.g.mass[allowed]) - spec.alpha[allowed]
    return allowed, soft, log_ref, h


def _rest_vector(spec: TiltSpec, rest) -> np.ndarray:
    rest = np.asarray(rest, dtype=float)
    if rest.shape != (len(spec.constraints),):
        raise ValueError(f"expected {len(spec.constraints)} multipliers, got {rest.shape}")
    return rest


def dual_value_reduced(spec: TiltSpec, rest) -> float:
    """Dual with lambda_0 eliminated: -sum lam_j H_j - ln sum g exp(-alpha - sum lam_j h_j)."""
    rest = _rest_vector(spec, rest)
    _, soft, log_ref, h = _reduced_terms(spec)
    value, _, _, _ = dual_solver.evaluate(log_ref, h, spec.constraints.targets[soft], rest[soft])
    return value


def lambda0_of(spec: TiltSpec, rest) -> float:
    """The lambda_0 that normalizes the tilted density: 1 + lambda_0 = ln sum g exp(-alpha - <lam, h>)."""
    rest = _rest_vector(spec, rest)
    _, soft, log_ref, h = _reduced_terms(spec)
    _, _, log_partition, _ = dual_solver.evaluate(log_ref, h, spec.constraints.targets[soft], rest[soft])
    if not np.isfinite(log_partition):
        raise DegenerateSupport("tilted reference has zero total mass")
    return log_partition - 1.0


def log_gamma(dual: DualSolution, cs: ConstraintSet) -> float:
    """(lambda_0 + 1) + sum over active j != 0 of lambda_j H_j; the minimum is its negative."""
    targets = cs.targets
    total = dual.lam[0] + 1.0
    for j in dual.active:
        if j > 0:
            total += dual.lam[j] * targets[j - 1]
    return float(total)


def solve(spec: TiltSpec, settings: Optional[SolverSettings] = None,
          raise_on_failure: bool = True, lam_init=None) -> ProjectionResult:
    """Unique minimizer of KL(f || g) + E_f[alpha] under spec.constraints.

    `lam_init` optionally starts the ascent from lambda_1 .. lambda_m (constraint order).
    """
    settings = settings or SolverSettings()
    cs = spec.constraints
    if settings.check_feasibility and len(cs):
        slack, witness = max_slack(cs, spec.g)
        if witness is None or slack <= settings.slater_tol:
            raise InfeasibleConstraints(
                f"constraint set fails Slater's condition (best slack {slack:.3e})",
                slack=None if witness is None else slack,
            )

    allowed, soft, log_ref, h = _reduced_terms(spec)
    inequality = np.array([not c.is_equality for c in cs], dtype=bool)[soft]
    ascent = dual_solver.maximize_reduced_dual(
        log_ref, h, cs.targets[soft], inequality,
        tolerance=settings.tolerance,
        max_iterations=settings.max_iterations,
        sigma=settings.armijo_sigma,
        backtrack=settings.backtrack,
        lam_init=None if lam_init is None else _rest_vector(spec, lam_init)[soft],
    )
    if not ascent.converged:
        message = (f"dual ascent stopped after {ascent.iterations} iterations "
                   f"with projected gradient {ascent.grad_norm:.3e}")
        if raise_on_failure:
            raise NotConverged(message)
        logger.debug(f"⚠️ {message}")

    mass = np.zeros(spec.g.grid.cells)
    mass[allowed] = ascent.weights
    f_star = Density(spec.g.grid, mass / mass.sum())

    lam = np.zeros(len(cs) + 1)
    lam[0] = ascent.log_partition - 1.0
    lam[1:][soft] = ascent.lam
    active = active_indices(cs, f_star, settings.active_tol)

    charged = f_star.mass > 0
    p = f_star.mass[charged]
    minimum = float(np.sum(p * (np.log(p) - np.log(spec.g.mass[charged]) + spec.alpha[charged])))
    dual = DualSolution(
        lam=lam,
        active=active,
        value=dual_value(spec, lam),
        converged=ascent.converged,
        iterations=ascent.iterations,
        grad_norm=ascent.grad_norm,
    )
    return ProjectionResult(f_star=f_star, dual=dual, minimum=minimum)


def maxent_solve(grid: Grid, constraints: ConstraintSet,
                 settings: Optional[SolverSettings] = None) -> ProjectionResult:
    """Constrained maximum entropy: the projection with uniform g and alpha = 0."""
    return solve(TiltSpec(uniform(grid), np.zeros(grid.cells), constraints), settings)
