"""Discretized densities on rectangular grids.

Integrals are midpoint-rule sums: a Density's mass already contains the
cell volume, so every formula below is a plain weighted sum over cells.
"""
import logging
from typing import Callable, Sequence, Tuple, Union

import numpy as np

from .errors import AbsContinuityViolation, AllZero, BadAxis, NegativeMass, NonFiniteH
from .types import ConditionalDensity, Density, Grid, JointDensity

logger = logging.getLogger(__name__)

CellFunction = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, Sequence[float]]


def normalize(raw, grid: Grid) -> Density:
    """Rescale a nonnegative vector so it sums to one."""
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0):
        raise NegativeMass("cannot normalize a vector with negative entries")
    total = raw.sum()
    if total <= 0:
        raise AllZero("cannot normalize an all-zero vector")
    return Density(grid, raw / total)


def uniform(grid: Grid) -> Density:
    return Density(grid, np.full(grid.cells, 1.0 / grid.cells))


def point_mass(grid: Grid, value: float) -> Density:
    mass = np.zeros(grid.cells)
    mass[int(grid.nearest_index(value))] = 1.0
    return Density(grid, mass)


def tabulate(h: CellFunction, grid: Grid) -> np.ndarray:
    """Values of h on the cell centers (h may already be a table)."""
    if callable(h):
        values = np.asarray(h(grid.centers), dtype=float)
        return np.broadcast_to(values, (grid.cells,)).astype(float)
    values = np.asarray(h, dtype=float)
    if values.shape != (grid.cells,):
        raise ValueError(f"table of shape {values.shape} does not match {grid.cells} cells")
    return values


def expectation(f: Density, h: CellFunction) -> float:
    """E_f[h] as the weighted sum over cells."""
    values = tabulate(h, f.grid)
    charged = f.mass > 0
    if not np.all(np.isfinite(values[charged])):
        raise NonFiniteH("h is not finite on a cell carrying probability mass")
    return float(np.dot(values[charged], f.mass[charged]))


def mean_mode(f: Density) -> float:
    return expectation(f, f.grid.centers)


def _check_axes(axes: Sequence[int], ndim: int) -> Tuple[int, ...]:
    axes = tuple(int(a) for a in axes)
    if not axes:
        raise BadAxis("at least one axis is required")
    if len(set(axes)) != len(axes):
        raise BadAxis(f"repeated axes {axes}")
    for a in axes:
        if not 0 <= a < ndim:
            raise BadAxis(f"axis {a} out of range for a {ndim}-D joint density")
    return axes


def marginalize(joint: JointDensity, kept: Sequence[int]) -> Union[Density, JointDensity]:
    """Sum out every axis not in `kept`; the result follows the order of `kept`."""
    kept = _check_axes(kept, joint.ndim)
    dropped = tuple(a for a in range(joint.ndim) if a not in kept)
    mass = joint.mass.sum(axis=dropped) if dropped else joint.mass
    # axes left after summing appear in ascending order
    remaining = sorted(kept)
    mass = np.transpose(mass, [remaining.index(a) for a in kept])
    mass = mass / mass.sum()
    if len(kept) == 1:
        return Density(joint.grids[kept[0]], mass)
    return JointDensity(tuple(joint.grids[a] for a in kept), mass)


def condition(joint: JointDensity, given: Sequence[int]) -> ConditionalDensity:
    """Rows f(target | given) = joint / marginal(given).

    Exactly one axis must remain as the target. Rows whose conditioning
    marginal is zero are filled with the uniform density and flagged.
    """
    given = _check_axes(given, joint.ndim)
    targets = [a for a in range(joint.ndim) if a not in given]
    if len(targets) != 1:
        raise BadAxis(f"conditioning on {given} leaves {len(targets)} target axes, expected 1")
    target = targets[0]
    mass = np.transpose(joint.mass, list(given) + [target])
    marginal = mass.sum(axis=-1, keepdims=True)
    empty = marginal[..., 0] <= 0
    cells = joint.grids[target].cells
    with np.errstate(divide="ignore", invalid="ignore"):
        table = np.where(marginal > 0, mass / np.where(marginal > 0, marginal, 1.0), 1.0 / cells)
    if empty.any():
        logger.debug(f"⚠️ {int(empty.sum())} conditioning cells have zero mass, filled uniform")
    return ConditionalDensity(tuple(joint.grids[a] for a in given), joint.grids[target], table, flagged=empty)


def apply_support_floor(q: np.ndarray, support_floor: float) -> np.ndarray:
    """Replace empty cells of q by `support_floor` and renormalize along the last axis."""
    if support_floor <= 0:
        return q
    q = np.where(q > 0, q, support_floor)
    return q / q.sum(axis=-1, keepdims=True)


def kl_rows(p: np.ndarray, q: np.ndarray, support_floor: float = 0.0) -> np.ndarray:
    """Row-wise KL(p || q) along the last axis, with 0 ln 0 = 0."""
    q = apply_support_floor(q, support_floor)
    bad = (p > 0) & (q <= 0)
    if bad.any():
        cell = tuple(int(i) for i in np.argwhere(bad)[0])
        raise AbsContinuityViolation(
            f"f has mass where g has none (cell {cell}); enable a support floor or fix the reference",
            cell=cell[:-1],
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def kl_divergence(f: Density, g: Density, support_floor: float = 0.0) -> float:
    if f.grid != g.grid:
        raise ValueError("KL divergence needs densities on identical grids")
    return float(kl_rows(f.mass, g.mass, support_floor))


def kl_conditional(f: ConditionalDensity, g: ConditionalDensity, support_floor: float = 0.0) -> np.ndarray:
    """Table of KL(f(.|c) || g(.|c)) over the conditioning cells c."""
    if f.given != g.given or f.target != g.target:
        raise ValueError("conditional densities must share their grids")
    out = np.empty(f.cond_shape)
    # chunk over the leading axis to bound temporaries on large transition tables
    for i in range(f.cond_shape[0]):
        try:
            out[i] = kl_rows(f.table[i], g.table[i], support_floor)
        except AbsContinuityViolation as e:
            cell = (i,) + tuple(e.cell or ())
            raise AbsContinuityViolation(f"conditioning cell {cell}: {e}", cell=cell) from None
    return out


def chain_rule_terms(joint_f: JointDensity, joint_g: JointDensity, split_axis: int = 0) -> Tuple[float, float]:
    """The two terms of the KL chain rule split at `split_axis`.

    Returns (KL of the split-axis marginals, expected KL of the conditionals
    of the remaining axes given the split axis).
    """
    if joint_f.grids != joint_g.grids:
        raise ValueError("joint densities must share their grids")
    (split_axis,) = _check_axes([split_axis], joint_f.ndim)
    f = np.moveaxis(joint_f.mass, split_axis, 0).reshape(joint_f.grids[split_axis].cells, -1)
    g = np.moveaxis(joint_g.mass, split_axis, 0).reshape(joint_g.grids[split_axis].cells, -1)
    f_y, g_y = f.sum(axis=1), g.sum(axis=1)
    marginal_term = float(kl_rows(f_y, g_y))
    charged = f_y > 0
    f_c = f[charged] / f_y[charged, None]
    g_c = g[charged] / g_y[charged, None]
    conditional_term = float(np.dot(f_y[charged], kl_rows(f_c, g_c)))
    return marginal_term, conditional_term


def sample_index(mass: np.ndarray, rng: np.random.Generator) -> int:
    """Cell index drawn with probability `mass` (one uniform draw per call)."""
    cumulative = np.cumsum(mass)
    idx = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(idx, mass.size - 1)


def sample(f: Density, rng: np.random.Generator) -> float:
    return float(f.grid.centers[sample_index(f.mass, rng)])
