"""Backward recursion that synthesizes the optimal randomized policy.

For k = n..1 the stage cost tilt is omega = alpha + beta, where alpha is the
KL between system and reference transitions and beta carries the
cost-to-go of stage k + 1 through ln gamma. Each state row of the policy is
one constrained KL projection of the example policy row.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .densities import kl_conditional, kl_divergence, kl_rows
from .errors import AbsContinuityViolation, InfeasibleConstraints, NotConverged
from .projection import log_gamma, solve
from .types import (ConditionalDensity, ConstraintSet, Density, DualSolution, Policy, ProjectionResult,
                    SolverSettings, StageCache, SynthesisProblem, SynthesisReport, TiltSpec)

logger = logging.getLogger(__name__)


def alpha_hat(f_x: ConditionalDensity, g_x: ConditionalDensity, stage: Optional[int] = None,
              support_floor: float = 0.0) -> np.ndarray:
    """KL(f_X(.|u, x) || g_X(.|u, x)) tabulated over (u, x_prev)."""
    try:
        return kl_conditional(f_x, g_x, support_floor)
    except AbsContinuityViolation as e:
        if stage is None:
            raise
        raise AbsContinuityViolation(f"stage {stage}, {e}", cell=(stage,) + tuple(e.cell or ())) from None


def beta_hat(f_x: ConditionalDensity, ln_gamma: np.ndarray) -> np.ndarray:
    """-E_{f_X(.|u, x)}[ln gamma(X_k)] tabulated over (u, x_prev)."""
    return -(f_x.table @ np.asarray(ln_gamma, dtype=float))


def gamma_update(duals: Sequence[DualSolution], constraint_sets: Sequence[ConstraintSet]) -> np.ndarray:
    """ln gamma(x) accumulated in log space from the multipliers of each state."""
    return np.array([log_gamma(d, cs) for d, cs in zip(duals, constraint_sets)], dtype=float)


def minimum_b(p_prev: Density, ln_gamma: np.ndarray) -> float:
    return float(-np.dot(p_prev.mass, ln_gamma))


def propagate(p: Density, policy_stage: ConditionalDensity, f_x: ConditionalDensity) -> Density:
    """p'(x') = sum over x, u of f_X(x' | u, x) policy(u | x) p(x)."""
    mass = np.einsum("uxy,xu,x->y", f_x.table, policy_stage.table, p.mass)
    return Density(p.grid, mass / mass.sum())


def state_marginals(policy: Policy, problem: SynthesisProblem) -> Tuple[Density, ...]:
    marginals = [problem.x0]
    for k in range(1, problem.horizon + 1):
        marginals.append(propagate(marginals[-1], policy.stage(k), problem.f_x[k - 1]))
    return tuple(marginals)


def _closed_loop_kl(policy: Policy, problem: SynthesisProblem, alphas: Sequence[np.ndarray],
                    marginals: Sequence[Density]) -> float:
    total = 0.0
    if problem.g0 is not None:
        total += kl_divergence(problem.x0, problem.g0)
    for k in range(1, problem.horizon + 1):
        p = marginals[k - 1].mass
        reached = p > 0
        pi = policy.stage(k).table[reached]
        stage_cost = kl_rows(pi, problem.g_u[k - 1].table[reached])
        stage_cost += np.einsum("xu,ux->x", pi, alphas[k - 1][:, reached])
        total += float(p[reached] @ stage_cost)
    return total


def kl_closed_loop(policy: Policy, problem: SynthesisProblem, support_floor: float = 0.0) -> float:
    """KL between closed-loop and reference joints, summed stage by stage.

    Each stage adds E_{p^{k-1}}[KL(policy || g_U) + E_policy[alpha_hat]];
    KL(f_0 || g_0) is added when a reference prior is given.
    """
    alphas = [alpha_hat(problem.f_x[k], problem.g_x[k], k + 1, support_floor) for k in range(problem.horizon)]
    return _closed_loop_kl(policy, problem, alphas, state_marginals(policy, problem))


class PolicySynthesizer:
    """Runs the backward recursion; per-state projections may use a thread pool."""

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()
        self.logger = logging.getLogger(__name__)

    def _solve_state(self, stage: int, state: int, g_row: Density, omega: np.ndarray,
                     cs: ConstraintSet) -> ProjectionResult:
        try:
            return solve(TiltSpec(g_row, omega, cs), self.settings, raise_on_failure=False)
        except InfeasibleConstraints as e:
            raise InfeasibleConstraints(f"stage {stage}, state {state}: {e}", slack=e.slack,
                                        stage=stage, state=state) from None

    def _solve_stage(self, stage: int, problem: SynthesisProblem, omega: np.ndarray,
                     executor: Optional[ThreadPoolExecutor]) -> List[ProjectionResult]:
        g_u = problem.g_u[stage - 1]
        sets = problem.constraints[stage - 1]
        jobs = [(stage, i, g_u.row(i), omega[:, i], sets[i]) for i in range(problem.state_grid.cells)]
        if executor is None:
            return [self._solve_state(*job) for job in jobs]
        return list(executor.map(lambda job: self._solve_state(*job), jobs))

    def synthesize(self, problem: SynthesisProblem) -> Tuple[Policy, SynthesisReport]:
        n = problem.horizon
        state, control = problem.state_grid, problem.control_grid
        ln_gamma = np.zeros(state.cells)  # gamma^{n+1} = 1
        tables: List[Optional[np.ndarray]] = [None] * n
        caches: List[Optional[StageCache]] = [None] * n
        failures: List[Tuple[int, int]] = []

        executor = ThreadPoolExecutor(max_workers=self.settings.workers, thread_name_prefix="projection") \
            if self.settings.workers > 1 else None
        try:
            for k in range(n, 0, -1):
                f_x = problem.f_x[k - 1]
                a_hat = alpha_hat(f_x, problem.g_x[k - 1], k, self.settings.support_floor)
                b_hat = beta_hat(f_x, ln_gamma)
                omega = a_hat + b_hat
                results = self._solve_stage(k, problem, omega, executor)
                duals = tuple(r.dual for r in results)
                stage_failures = [(k, i) for i, d in enumerate(duals) if not d.converged]
                failures.extend(stage_failures)
                tables[k - 1] = np.vstack([r.f_star.mass for r in results])
                ln_gamma = gamma_update(duals, problem.constraints[k - 1])
                caches[k - 1] = StageCache(k, a_hat, b_hat, omega, ln_gamma, duals)
                self.logger.info(
                    f"🔄 Stage {k}/{n}: {state.cells} projections, "
                    f"max {max(d.iterations for d in duals)} ascent iterations"
                    + (f", ⚠️ {len(stage_failures)} unconverged" if stage_failures else "")
                )
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        policy = Policy(tuple(
            ConditionalDensity((state,), control, tables[k], flagged=problem.g_u[k].flagged) for k in range(n)
        ))
        marginals = state_marginals(policy, problem)
        b_star = np.array([minimum_b(marginals[k - 1], caches[k - 1].ln_gamma) for k in range(1, n + 1)])
        flagged = tuple((k + 1, int(i)) for k in range(n) for i in np.flatnonzero(problem.g_u[k].flagged))
        report = SynthesisReport(
            b_star=b_star,
            state_marginals=marginals,
            duals=tuple(c.duals for c in caches),
            unconverged=tuple(failures),
            flagged_rows=flagged,
            stages=tuple(caches),
            closed_loop_kl=_closed_loop_kl(policy, problem, [c.alpha_hat for c in caches], marginals),
        )
        if failures:
            message = f"{len(failures)} (stage, state) projections did not converge"
            if not self.settings.allow_unconverged:
                raise NotConverged(message, cells=failures, report=report)
            self.logger.warning(f"⚠️ {message}")
        self.logger.info(f"✅ Synthesis done: B*_1 = {b_star[0]:.6g}, closed-loop KL = {report.closed_loop_kl:.6g}")
        return policy, report


def synthesize(problem: SynthesisProblem, settings: Optional[SolverSettings] = None) -> Tuple[Policy, SynthesisReport]:
    return PolicySynthesizer(settings).synthesize(problem)
