"""Closed-loop rollouts of a synthesized policy and their per-stage bands."""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence, Tuple, Union

import numpy as np

from .densities import sample_index
from .types import (BandStatistics, ConditionalDensity, ControlMode, GaussianTransition, Policy,
                    RolloutConfig, RolloutResult)

logger = logging.getLogger(__name__)

Transitions = Union[Sequence[ConditionalDensity], GaussianTransition]


def rollout_rng(seed: int, index: int) -> np.random.Generator:
    """Stream of rollout `index`; independent of how many rollouts are run."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


class Simulator:
    """Samples x_0 from the prior, then u_k from the policy and x_k from the transition model."""

    def __init__(self, policy: Policy, transitions: Transitions, config: RolloutConfig):
        if config.horizon > policy.horizon:
            raise ValueError(f"rollout horizon {config.horizon} exceeds policy horizon {policy.horizon}")
        if not isinstance(transitions, GaussianTransition) and len(transitions) < config.horizon:
            raise ValueError(f"{len(transitions)} transition stages for a horizon of {config.horizon}")
        self.policy = policy
        self.transitions = transitions
        self.config = config
        self.state = config.x0.grid
        self.control = policy.stage(1).target
        if policy.stage(1).given != (self.state,):
            raise ValueError("policy and initial density use different state grids")
        self.logger = logging.getLogger(__name__)

    def _control(self, row: np.ndarray, rng: np.random.Generator) -> int:
        if self.config.control_mode is ControlMode.MEAN:
            return int(self.control.nearest_index(float(row @ self.control.centers)))
        return sample_index(row, rng)

    def _next_state(self, k: int, iu: int, ix: int, rng: np.random.Generator) -> Tuple[int, bool]:
        if isinstance(self.transitions, GaussianTransition):
            gt = self.transitions
            mean = gt.a * self.state.centers[ix] + gt.b * self.control.centers[iu]
            x = mean + np.sqrt(gt.sigma2) * rng.standard_normal()
            escaped = bool(self.state.cell_index(x) < 0)
            return int(self.state.nearest_index(x)), escaped
        return sample_index(self.transitions[k - 1].table[iu, ix], rng), False

    def run_one(self, index: int) -> Tuple[float, np.ndarray, np.ndarray, int]:
        rng = rollout_rng(self.config.seed, index)
        n = self.config.horizon
        ix = sample_index(self.config.x0.mass, rng)
        x0 = float(self.state.centers[ix])
        xs, us = np.empty(n), np.empty(n)
        clips = 0
        for k in range(1, n + 1):
            iu = self._control(self.policy.stage(k).table[ix], rng)
            ix, escaped = self._next_state(k, iu, ix, rng)
            clips += escaped
            us[k - 1] = self.control.centers[iu]
            xs[k - 1] = self.state.centers[ix]
        return x0, xs, us, clips

    def run(self) -> RolloutResult:
        cfg = self.config
        self.logger.info(f"🚀 Running {cfg.rollouts} rollouts over {cfg.horizon} stages "
                         f"({cfg.control_mode.value} control, seed {cfg.seed})")
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers, thread_name_prefix="rollout") as pool:
                runs = list(pool.map(self.run_one, range(cfg.rollouts)))
        else:
            runs = [self.run_one(i) for i in range(cfg.rollouts)]

        clip_count = sum(r[3] for r in runs)
        if clip_count:
            self.logger.warning(f"⚠️ {clip_count} sampled states left the state grid and were clipped")
        result = RolloutResult(
            x0=np.array([r[0] for r in runs]),
            x=np.vstack([r[1] for r in runs]),
            u=np.vstack([r[2] for r in runs]),
            clip_count=clip_count,
        )
        return RolloutResult(result.x0, result.x, result.u, clip_count, band_statistics(result))


def rollout(policy: Policy, transitions: Transitions, config: RolloutConfig) -> RolloutResult:
    return Simulator(policy, transitions, config).run()


def band_statistics(result: RolloutResult) -> BandStatistics:
    """Per-stage sample mean and unbiased standard deviation (0 for a single rollout)."""
    def spread(values: np.ndarray) -> np.ndarray:
        if values.shape[0] < 2:
            return np.zeros(values.shape[1])
        return values.std(axis=0, ddof=1)

    return BandStatistics(
        mean_x=result.x.mean(axis=0),
        std_x=spread(result.x),
        mean_u=result.u.mean(axis=0),
        std_u=spread(result.u),
    )
