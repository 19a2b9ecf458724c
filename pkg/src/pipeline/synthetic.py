"""Synthetic test drives with known transition parameters.

Each drive starts inside the configured x0 window; the driver targets a
speed profile that dips around the junction, and positions follow
x_k ~ Normal(a x_{k-1} + b u_k, sigma2).
"""
import logging
from typing import List, Optional, Tuple

import numpy as np

from core.types import GaussianTransition, Grid, Trajectory
from services.settings import SyntheticConfig

logger = logging.getLogger(__name__)


def speed_profile(x: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    """Target speed at position x: cruise speed minus a Gaussian dip centered on the junction."""
    return cfg.cruise_speed - cfg.dip * np.exp(-0.5 * ((np.asarray(x) - cfg.junction) / cfg.width) ** 2)


def simulate_drive(drive_id: str, horizon: int, transition: GaussianTransition, speed_noise: float,
                   cfg: SyntheticConfig, control: Grid, rng: np.random.Generator) -> Trajectory:
    x = np.empty(horizon + 1)
    u = np.empty(horizon + 1)
    x[0] = rng.uniform(*cfg.x0)
    offset = speed_noise * rng.standard_normal()
    u[0] = speed_profile(x[0], cfg)
    for k in range(1, horizon + 1):
        target = speed_profile(x[k - 1], cfg) + offset
        u[k] = np.clip(target + speed_noise * rng.standard_normal(), control.lower, control.upper)
        x[k] = transition.a * x[k - 1] + transition.b * u[k] + np.sqrt(transition.sigma2) * rng.standard_normal()
    return Trajectory(drive_id, np.arange(horizon + 1), x, u)


def generate_drives(cfg: SyntheticConfig, horizon: int, control: Grid,
                    seed: Optional[int] = None) -> Tuple[List[Trajectory], List[Trajectory]]:
    """Complete and example collections; ids are zero-padded so they sort in drive order."""
    seed = cfg.seed if seed is None else seed
    complete_rng, example_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    complete = [
        simulate_drive(f"complete-{i:04d}", horizon, cfg.complete.to_model(), cfg.complete_speed_noise,
                       cfg, control, complete_rng)
        for i in range(cfg.complete_drives)
    ]
    example = [
        simulate_drive(f"example-{i:04d}", horizon, cfg.example.to_model(), cfg.example_speed_noise,
                       cfg, control, example_rng)
        for i in range(cfg.example_drives)
    ]
    logger.info(f"✅ Generated {len(complete)} complete and {len(example)} example drives of {horizon} stages")
    return complete, example
