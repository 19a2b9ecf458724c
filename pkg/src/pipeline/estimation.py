"""From trajectory data to the conditional densities the synthesis needs.

Samples are paired along each trajectory: stage k contributes
(x_{k-1}, u_k, x_k) whenever samples k - 1 and k are both present.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from core.constraints import constraint_set, moment_equality
from core.densities import condition, expectation
from core.errors import NoInRangeSamples, NotConverged, RankDeficient
from core.projection import maxent_solve
from core.types import (ConditionalDensity, DatasetCollection, GaussianTransition, Grid, JointDensity,
                        SampleCounts, SolverSettings)

logger = logging.getLogger(__name__)

VARIABLES = ("x_prev", "u", "x")


def sample_table(data: DatasetCollection, stage: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Columns x_prev, u, x and stage over every consecutive sample pair."""
    parts = {name: [] for name in VARIABLES + ("stage",)}
    for t in data.trajectories:
        consecutive = np.flatnonzero(np.diff(t.k) == 1) + 1
        parts["x_prev"].append(t.x[consecutive - 1])
        parts["u"].append(t.u[consecutive])
        parts["x"].append(t.x[consecutive])
        parts["stage"].append(t.k[consecutive])
    table = {name: np.concatenate(values) if values else np.empty(0) for name, values in parts.items()}
    if stage is not None:
        keep = table["stage"] == stage
        table = {name: values[keep] for name, values in table.items()}
    return table


def histogram(columns: Sequence[np.ndarray], grids: Sequence[Grid]) -> Tuple[JointDensity, SampleCounts]:
    """Normalized cell counts; samples outside any grid are dropped and counted."""
    if len(columns) != len(grids):
        raise ValueError("one grid per column is required")
    index = np.vstack([g.cell_index(c) for c, g in zip(columns, grids)])
    inside = np.all(index >= 0, axis=0)
    total = index.shape[1]
    kept = int(inside.sum())
    if kept == 0:
        raise NoInRangeSamples(f"none of the {total} samples fall inside the grids")
    shape = tuple(g.cells for g in grids)
    flat = np.ravel_multi_index(tuple(index[:, inside]), shape)
    counts = np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape)
    return JointDensity(tuple(grids), counts / kept), SampleCounts(in_range=kept, dropped=total - kept)


def empirical_joint(data: DatasetCollection, grids: Sequence[Grid],
                    variables: Sequence[str] = ("x_prev", "u"),
                    stage: Optional[int] = None) -> Tuple[JointDensity, SampleCounts]:
    """Histogram of the named variables, pooled over stages unless `stage` is given."""
    unknown = [v for v in variables if v not in VARIABLES]
    if unknown:
        raise ValueError(f"unknown variables {unknown}, choose from {VARIABLES}")
    table = sample_table(data, stage)
    joint, counts = histogram([table[v] for v in variables], grids)
    if counts.dropped:
        logger.warning(f"⚠️ {counts.dropped} of {counts.in_range + counts.dropped} "
                       f"{data.role} samples outside the grid were dropped")
    return joint, counts


def fit_gaussian_transition(data: DatasetCollection) -> GaussianTransition:
    """Least squares of x_k on (x_{k-1}, u_k) without intercept; sigma2 is the residual mean square."""
    table = sample_table(data)
    n = table["x"].size
    if n < 3:
        raise RankDeficient(f"need at least 3 consecutive sample pairs, got {n}")
    regressors = np.column_stack([table["x_prev"], table["u"]])
    coef, _, rank, _ = np.linalg.lstsq(regressors, table["x"], rcond=None)
    if rank < 2:
        raise RankDeficient("regressors (x_prev, u) are linearly dependent")
    residual = table["x"] - regressors @ coef
    sigma2 = float(residual @ residual) / (n - 2)
    if sigma2 <= 0:
        # exact fit; keep the model a proper density
        sigma2 = np.finfo(float).tiny
    gt = GaussianTransition(float(coef[0]), float(coef[1]), sigma2)
    logger.info(f"📊 {data.role} fit: a={gt.a:.4f}, b={gt.b:.4f}, sigma2={gt.sigma2:.4f} ({n} pairs)")
    return gt


def gaussian_to_conditional(gt: GaussianTransition, state: Grid, control: Grid) -> ConditionalDensity:
    """Discretize Normal(a x + b u, sigma2) onto the state grid, one row per (u, x_prev)."""
    means = gt.a * state.centers[None, :] + gt.b * control.centers[:, None]
    log_mass = norm.logpdf(state.centers[None, None, :], loc=means[:, :, None], scale=np.sqrt(gt.sigma2))
    log_mass = log_mass + np.log(state.widths)
    table = np.exp(log_mass - logsumexp(log_mass, axis=-1, keepdims=True))
    table /= table.sum(axis=-1, keepdims=True)
    return ConditionalDensity((control, state), state, table)


def extract_policy(joint: JointDensity) -> ConditionalDensity:
    """g(u_k | x_{k-1}) from the joint over (x_{k-1}, u_k)."""
    return condition(joint, (0,))


def empirical_transition(joint: JointDensity) -> ConditionalDensity:
    """f(x_k | u_k, x_{k-1}) from the joint over (u_k, x_{k-1}, x_k)."""
    return condition(joint, (0, 1))


def maxent_rows(policy: ConditionalDensity, settings: Optional[SolverSettings] = None,
                min_support: int = 2) -> ConditionalDensity:
    """Replace each row with enough support by the maximum-entropy pdf sharing its mean and second moment."""
    grid = policy.target
    table = np.array(policy.table)
    replaced = 0
    for i in range(table.shape[0]):
        row = policy.row(i)
        if policy.flagged[i] or np.count_nonzero(row.mass) < min_support:
            continue
        cs = constraint_set([
            moment_equality(1, expectation(row, grid.centers), grid),
            moment_equality(2, expectation(row, grid.centers ** 2), grid),
        ])
        try:
            table[i] = maxent_solve(grid, cs, settings).f_star.mass
            replaced += 1
        except NotConverged:
            logger.warning(f"⚠️ maximum-entropy fit of row {i} did not converge, keeping the histogram")
    logger.debug(f"🔄 {replaced} of {table.shape[0]} example rows replaced by maximum-entropy fits")
    return ConditionalDensity(policy.given, grid, table, flagged=policy.flagged)


@dataclass
class EstimationResult:
    g_u: Tuple[ConditionalDensity, ...]
    f_x: Tuple[ConditionalDensity, ...]
    g_x: Tuple[ConditionalDensity, ...]
    fits: Dict[str, GaussianTransition] = field(default_factory=dict)
    counts: Dict[str, SampleCounts] = field(default_factory=dict)
    joints: Dict[str, JointDensity] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "stages": len(self.g_u),
            "fits": {name: {"a": gt.a, "b": gt.b, "sigma2": gt.sigma2} for name, gt in sorted(self.fits.items())},
            "counts": {name: {"in_range": c.in_range, "dropped": c.dropped} for name, c in sorted(self.counts.items())},
            "flagged_rows": [int(p.flagged.sum()) for p in self.g_u],
        }


class Estimator:
    """Builds per-stage g_U, f_X and g_X from complete and example data.

    transition_source picks the transition model: "reference" uses the given
    Gaussian models, "fitted" the least-squares fits of the data and
    "empirical" the conditioned histograms.
    """

    def __init__(self, state: Grid, control: Grid, horizon: int, per_stage: bool = False,
                 transition_source: str = "reference", example_policy_form: str = "empirical",
                 reference: Optional[Dict[str, GaussianTransition]] = None,
                 settings: Optional[SolverSettings] = None):
        if transition_source not in ("reference", "fitted", "empirical"):
            raise ValueError(f"unknown transition source '{transition_source}'")
        if example_policy_form not in ("empirical", "maxent"):
            raise ValueError(f"unknown example policy form '{example_policy_form}'")
        if transition_source == "reference" and not {"complete", "example"} <= set(reference or {}):
            raise ValueError("reference transitions need both 'complete' and 'example' models")
        self.state = state
        self.control = control
        self.horizon = horizon
        self.per_stage = per_stage
        self.transition_source = transition_source
        self.example_policy_form = example_policy_form
        self.reference = dict(reference or {})
        self.settings = settings
        self.logger = logging.getLogger(__name__)

    def _stages(self):
        return range(1, self.horizon + 1) if self.per_stage else [None]

    def _expand(self, items):
        return tuple(items) if self.per_stage else tuple(items) * self.horizon

    def _policies(self, example: DatasetCollection, counts: Dict[str, SampleCounts],
                  joints: Dict[str, JointDensity]):
        policies = []
        for stage in self._stages():
            joint, c = empirical_joint(example, (self.state, self.control), ("x_prev", "u"), stage)
            key = "example" if stage is None else f"example/{stage}"
            counts[key], joints[key] = c, joint
            policy = extract_policy(joint)
            if self.example_policy_form == "maxent":
                policy = maxent_rows(policy, self.settings)
            policies.append(policy)
        return self._expand(policies)

    def _transitions(self, data: Optional[DatasetCollection], role: str, result_fits: Dict,
                     counts: Dict[str, SampleCounts], joints: Dict[str, JointDensity]):
        if self.transition_source == "reference":
            return (gaussian_to_conditional(self.reference[role], self.state, self.control),) * self.horizon
        if data is None:
            raise ValueError(f"transition source '{self.transition_source}' needs {role} data")
        if self.transition_source == "fitted":
            if role not in result_fits:
                raise RankDeficient(f"no least-squares fit available for the {role} data")
            return (gaussian_to_conditional(result_fits[role], self.state, self.control),) * self.horizon
        tables = []
        for stage in self._stages():
            joint, c = empirical_joint(data, (self.control, self.state, self.state), ("u", "x_prev", "x"), stage)
            key = f"{role}_transition" if stage is None else f"{role}_transition/{stage}"
            counts[key], joints[key] = c, joint
            tables.append(empirical_transition(joint))
        return self._expand(tables)

    def estimate(self, example: DatasetCollection,
                 complete: Optional[DatasetCollection] = None) -> EstimationResult:
        self.logger.info(f"🚀 Estimating densities: {self.state.cells} states x {self.control.cells} controls, "
                         f"horizon {self.horizon}, transitions from {self.transition_source}")
        counts: Dict[str, SampleCounts] = {}
        fits: Dict[str, GaussianTransition] = {}
        joints: Dict[str, JointDensity] = {}
        for role, data in (("complete", complete), ("example", example)):
            if data is not None:
                try:
                    fits[role] = fit_gaussian_transition(data)
                except RankDeficient as e:
                    if self.transition_source == "fitted":
                        raise
                    self.logger.warning(f"⚠️ no {role} fit: {e}")

        g_u = self._policies(example, counts, joints)
        result = EstimationResult(
            g_u=g_u,
            f_x=self._transitions(complete, "complete", fits, counts, joints),
            g_x=self._transitions(example, "example", fits, counts, joints),
            fits=fits,
            counts=counts,
            joints=joints,
        )
        flagged = sum(int(p.flagged.sum()) for p in (g_u if self.per_stage else g_u[:1]))
        if flagged:
            self.logger.warning(f"⚠️ {flagged} example policy rows have no data and were filled uniform")
        self.logger.info("✅ Estimation complete")
        return result
