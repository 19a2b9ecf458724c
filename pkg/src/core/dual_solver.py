"""Projected gradient ascent on the reduced Lagrange dual of a KL projection.

With the normalization multiplier eliminated, the dual of

    min_f KL(f || g) + E_f[alpha]  s.t.  E_f[h_j] = H_j (j < n_e),  E_f[h_j] <= H_j (j >= n_e)

is the smooth concave function

    D(lam) = -<lam, H> - ln sum_z g(z) exp(-alpha(z) - <lam, h(z)>)

whose gradient is E_{f(lam)}[h] - H, i.e. the constraint values at the
tilted density. Inequality multipliers live on [0, inf).
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class AscentResult:
    lam: np.ndarray  # explicit multipliers, lambda_1..lambda_m
    log_partition: float  # ln sum g exp(-alpha - <lam, h>) = 1 + lambda_0
    value: float  # reduced dual value
    gradient: np.ndarray  # c_j at the tilted density
    weights: np.ndarray  # normalized tilted density on the given cells
    grad_norm: float
    iterations: int
    converged: bool


def evaluate(log_ref: np.ndarray, h: np.ndarray, targets: np.ndarray,
             lam: np.ndarray) -> Tuple[float, np.ndarray, float, np.ndarray]:
    """Reduced dual value, gradient, log-partition and tilted weights at lam."""
    exponent = log_ref - lam @ h
    top = exponent.max()
    weights = np.exp(exponent - top)
    total = weights.sum()
    log_partition = float(top + np.log(total))
    weights /= total
    value = float(-lam @ targets - log_partition)
    gradient = h @ weights - targets
    return value, gradient, log_partition, weights


def projected_gradient_norm(lam: np.ndarray, gradient: np.ndarray, inequality: np.ndarray) -> float:
    pg = gradient.copy()
    at_bound = inequality & (lam <= 0)
    pg[at_bound] = np.maximum(gradient[at_bound], 0.0)
    return float(np.linalg.norm(pg))


def _scales(log_ref: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Per-constraint spread of h under the untilted reference."""
    if h.shape[0] == 0:
        return np.ones(0)
    weights = np.exp(log_ref - log_ref.max())
    weights /= weights.sum()
    mean = h @ weights
    spread = np.sqrt(np.maximum(((h - mean[:, None]) ** 2) @ weights, 0.0))
    fallback = np.maximum(np.abs(h).max(axis=1), 1.0)
    return np.where(spread > 1e-12 * fallback, spread, fallback)


def maximize_reduced_dual(log_ref: np.ndarray, h: np.ndarray, targets: np.ndarray,
                          inequality: np.ndarray, *, tolerance: float = 1e-9,
                          max_iterations: int = 50_000, sigma: float = 1e-4,
                          backtrack: float = 0.5,
                          lam_init: Optional[np.ndarray] = None) -> AscentResult:
    """Maximize the reduced dual by projected gradient ascent with Armijo backtracking.

    Multipliers are rescaled by the reference spread of their h_j (a
    diagonal preconditioner) and trial steps come from the Barzilai-Borwein
    rule; convergence is tested on the unscaled projected gradient.
    """
    log_ref = np.asarray(log_ref, dtype=float)
    h = np.asarray(h, dtype=float).reshape(-1, log_ref.size)
    targets = np.asarray(targets, dtype=float)
    inequality = np.asarray(inequality, dtype=bool)
    scale = _scales(log_ref, h)

    lam = np.zeros(h.shape[0]) if lam_init is None else np.array(lam_init, dtype=float)
    lam[inequality] = np.maximum(lam[inequality], 0.0)
    mu = lam * scale
    value, gradient, log_partition, weights = evaluate(log_ref, h, targets, lam)

    step = 1.0
    iterations = 0
    grad_norm = projected_gradient_norm(lam, gradient, inequality)
    converged = grad_norm <= tolerance
    while not converged and iterations < max_iterations:
        iterations += 1
        direction = gradient / scale
        slack = 8 * _EPS * (abs(value) + abs(log_partition) + float(np.abs(lam) @ np.abs(targets)) + 1.0)
        t = step
        accepted = False
        for _ in range(80):
            mu_new = mu + t * direction
            mu_new[inequality] = np.maximum(mu_new[inequality], 0.0)
            lam_new = mu_new / scale
            trial = evaluate(log_ref, h, targets, lam_new)
            if trial[0] >= value + sigma * float(direction @ (mu_new - mu)) - slack:
                accepted = True
                break
            t *= backtrack
        if not accepted:
            logger.debug(f"⚠️ line search stalled after {iterations} iterations (|pg|={grad_norm:.3e})")
            break

        s_vec = mu_new - mu
        y_vec = direction - trial[1] / scale
        sy = float(s_vec @ y_vec)
        step = float(np.clip((s_vec @ s_vec) / sy, 1e-10, 1e10)) if sy > 0 else min(2.0 * t, 1e10)

        mu, lam = mu_new, lam_new
        value, gradient, log_partition, weights = trial
        grad_norm = projected_gradient_norm(lam, gradient, inequality)
        converged = grad_norm <= tolerance

    return AscentResult(
        lam=lam,
        log_partition=log_partition,
        value=value,
        gradient=gradient,
        weights=weights,
        grad_norm=grad_norm,
        iterations=iterations,
        converged=converged,
    )
