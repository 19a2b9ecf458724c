"""Expectation-form constraints c[f] = E_f[h] - H and the Slater feasibility check."""
import logging
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy.optimize import linprog

from . import dual_solver
from .densities import expectation, normalize
from .errors import EmptyInterval, InfeasibleConstraints
from .types import Constraint, ConstraintKind, ConstraintSet, Density, Grid

logger = logging.getLogger(__name__)


def normalization(grid: Grid) -> Constraint:
    """h_0 = indicator of the grid, H_0 = 1 (always implicitly present)."""
    return Constraint(np.ones(grid.cells), 1.0, ConstraintKind.EQUALITY, label="normalization")


def moment_equality(order: int, target: float, grid: Grid) -> Constraint:
    if order < 1:
        raise ValueError(f"moment order must be at least 1, got {order}")
    return Constraint(grid.centers ** order, target, ConstraintKind.EQUALITY, label=f"E[z^{order}] = {target:g}")


def moment_inequality(order: int, target: float, grid: Grid, sense: str = "<=") -> Constraint:
    """One-sided moment bound; ">=" bounds are negated into "<= 0" form."""
    if order < 1:
        raise ValueError(f"moment order must be at least 1, got {order}")
    if sense == "<=":
        return Constraint(grid.centers ** order, target, ConstraintKind.INEQUALITY,
                          label=f"E[z^{order}] <= {target:g}")
    if sense == ">=":
        return Constraint(-grid.centers ** order, -target, ConstraintKind.INEQUALITY,
                          label=f"E[z^{order}] >= {target:g}")
    raise ValueError(f"unknown inequality sense '{sense}'")


def rectangular_bound(order: int, lower: float, upper: float, grid: Grid) -> Tuple[Constraint, Constraint]:
    """lower <= E[z^order] <= upper as two "<= 0" inequalities."""
    if lower > upper:
        raise EmptyInterval(f"empty moment interval [{lower}, {upper}]")
    return (
        moment_inequality(order, upper, grid, "<="),
        moment_inequality(order, lower, grid, ">="),
    )


def interval_mask(grid: Grid, lower: float, upper: float) -> np.ndarray:
    """Cells whose centers fall in [lower, upper]."""
    return (grid.centers >= lower) & (grid.centers <= upper)


def bound_probability(subset: np.ndarray, epsilon: float) -> Constraint:
    """P(Z in subset) >= 1 - epsilon, i.e. E[-1_subset] - (-(1 - epsilon)) <= 0.

    With epsilon = 0 the constraint also restricts the support to the subset.
    """
    subset = np.asarray(subset, dtype=bool)
    if not subset.any():
        raise ValueError("probability bound needs a nonempty subset")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    return Constraint(
        -subset.astype(float),
        -(1.0 - epsilon),
        ConstraintKind.INEQUALITY,
        label=f"P(subset) >= {1.0 - epsilon:g}",
        support=subset if epsilon == 0 else None,
    )


def evaluate(c: Constraint, f: Density) -> float:
    return expectation(f, c.h) - c.target


def evaluate_set(cs: ConstraintSet, f: Density) -> np.ndarray:
    return np.array([evaluate(c, f) for c in cs], dtype=float)


def active_indices(cs: ConstraintSet, f: Density, tol: float = 1e-6) -> Tuple[int, ...]:
    """Active set: 0, every equality, and inequalities with |c_j[f]| <= tol."""
    values = evaluate_set(cs, f)
    active = [0]
    for j, (c, v) in enumerate(zip(cs, values), start=1):
        if c.is_equality or abs(v) <= tol:
            active.append(j)
    return tuple(active)


def allowed_cells(cs: ConstraintSet, g: Density) -> np.ndarray:
    """Cells a feasible f may charge: the support of g minus hard exclusions."""
    allowed = g.mass > 0
    mask = cs.support_mask(g.grid.cells)
    return allowed if mask is None else allowed & mask


def _soft(cs: ConstraintSet) -> Tuple[Constraint, ...]:
    return tuple(c for c in cs if c.support is None)


def max_slack(cs: ConstraintSet, g: Density, cap: float = 1.0) -> Tuple[float, Optional[np.ndarray]]:
    """Largest t with equalities met and every inequality <= -t, over pdfs f << g.

    Returns (t, f) from a linear program over the simplex on the allowed
    cells; t is +inf when there are no inequalities and f is None when the
    equalities alone are infeasible.
    """
    allowed = allowed_cells(cs, g)
    n = int(allowed.sum())
    if n == 0:
        return -np.inf, None
    soft = _soft(cs)
    eq = [c for c in soft if c.is_equality]
    ineq = [c for c in soft if not c.is_equality]

    a_eq = np.vstack([np.ones(n)] + [c.h[allowed] for c in eq])
    b_eq = np.array([1.0] + [c.target for c in eq])
    a_eq = np.hstack([a_eq, np.zeros((a_eq.shape[0], 1))])
    a_ub = b_ub = None
    if ineq:
        a_ub = np.hstack([np.vstack([c.h[allowed] for c in ineq]), np.ones((len(ineq), 1))])
        b_ub = np.array([c.target for c in ineq])
    objective = np.zeros(n + 1)
    objective[-1] = -1.0 if ineq else 0.0
    bounds = [(0.0, None)] * n + [(None, cap)]
    res = linprog(objective, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0 or res.x is None:
        return -np.inf, None
    f = np.zeros(g.grid.cells)
    f[allowed] = np.maximum(res.x[:n], 0.0)
    slack = float(res.x[-1]) if ineq else np.inf
    return slack, f


def check_slater(cs: ConstraintSet, g: Density, tol: float = 1e-8,
                 dual_tolerance: float = 1e-10, max_iterations: int = 10_000) -> Density:
    """Return a pdf f << g meeting every equality and every inequality strictly.

    Raises InfeasibleConstraints carrying the best slack when no such pdf exists.
    """
    witness, _ = slater_certificate(cs, g, tol, dual_tolerance, max_iterations)
    return witness


def slater_certificate(cs: ConstraintSet, g: Density, tol: float = 1e-8,
                       dual_tolerance: float = 1e-10, max_iterations: int = 10_000) -> Tuple[Density, float]:
    """Witness plus the best inequality slack (capped at 1, inf without inequalities)."""
    slack, lp_witness = max_slack(cs, g)
    if lp_witness is None:
        raise InfeasibleConstraints("equality constraints cannot be met by any pdf on the reference support",
                                    slack=None if np.isneginf(slack) else slack)
    if slack <= tol:
        raise InfeasibleConstraints(f"no strictly feasible pdf: best inequality slack {slack:.3e}", slack=slack)

    allowed = allowed_cells(cs, g)
    soft = _soft(cs)
    if not soft:
        return normalize(np.where(allowed, g.mass, 0.0), g.grid), slack

    # interior witness: I-projection of g onto the set tightened by half the slack
    shift = 0.0 if np.isinf(slack) else slack / 2.0
    h = np.vstack([c.h[allowed] for c in soft])
    targets = np.array([c.target - (0.0 if c.is_equality else shift) for c in soft])
    inequality = np.array([not c.is_equality for c in soft])
    result = dual_solver.maximize_reduced_dual(
        np.log(g.mass[allowed]), h, targets, inequality,
        tolerance=dual_tolerance, max_iterations=max_iterations,
    )
    mass = np.zeros(g.grid.cells)
    mass[allowed] = result.weights
    witness = normalize(mass, g.grid)
    if not _strictly_feasible(cs, witness, tol):
        logger.debug("⚠️ interior witness failed verification, falling back to the LP vertex")
        witness = normalize(lp_witness, g.grid)
    return witness, slack


def _strictly_feasible(cs: ConstraintSet, f: Density, tol: float) -> bool:
    for c, v in zip(cs, evaluate_set(cs, f)):
        if c.support is not None:
            if np.any(f.mass[~c.support] > 0):
                return False
        elif c.is_equality:
            if abs(v) > tol:
                return False
        elif v >= -tol:
            return False
    return True


def satisfied(cs: ConstraintSet, f: Density, tol: float = 1e-6) -> bool:
    """Equalities within tol, inequalities at most tol."""
    values = evaluate_set(cs, f)
    return all(abs(v) <= tol if c.is_equality else v <= tol for c, v in zip(cs, values))


def constraint_set(constraints: Iterable[Constraint]) -> ConstraintSet:
    """Flatten constraints and constraint pairs into a ConstraintSet."""
    flat = []
    for c in constraints:
        if isinstance(c, tuple):
            flat.extend(c)
        else:
            flat.append(c)
    return ConstraintSet(tuple(flat))
