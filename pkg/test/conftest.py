import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from core.types import ConditionalDensity, ConstraintSet, Density, Grid, SynthesisProblem  # noqa: E402


def random_rows(rng: np.random.Generator, shape, cells: int, concentration: float = 1.0) -> np.ndarray:
    """Strictly positive rows drawn from a Dirichlet distribution."""
    rows = rng.dirichlet(np.full(cells, concentration), size=shape)
    rows = np.maximum(rows, 1e-6)
    return rows / rows.sum(axis=-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_cells():
    """Grid with centers 0.5 and 1.5."""
    return Grid(0.0, 2.0, 2)


@pytest.fixture
def make_problem():
    """Factory for small random synthesis problems on [0, nx] x [0, nu] grids."""
    def build(horizon=2, nx=2, nu=2, seed=0, constraints=None, same_transitions=False, x0=None):
        rng = np.random.default_rng(seed)
        state, control = Grid(0.0, float(nx), nx), Grid(0.0, float(nu), nu)
        f_x = tuple(ConditionalDensity((control, state), state, random_rows(rng, (nu, nx), nx))
                    for _ in range(horizon))
        g_x = f_x if same_transitions else tuple(
            ConditionalDensity((control, state), state, random_rows(rng, (nu, nx), nx)) for _ in range(horizon))
        g_u = tuple(ConditionalDensity((state,), control, random_rows(rng, (nx,), nu)) for _ in range(horizon))
        if constraints is None:
            sets = tuple(tuple(ConstraintSet() for _ in range(nx)) for _ in range(horizon))
        else:
            sets = tuple(tuple(constraints(k, i, control) for i in range(nx)) for k in range(1, horizon + 1))
        prior = x0 if x0 is not None else Density(state, np.full(nx, 1.0 / nx))
        return SynthesisProblem(horizon, f_x, g_x, g_u, sets, prior)

    return build
