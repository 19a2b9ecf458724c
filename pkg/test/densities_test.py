import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.densities import (chain_rule_terms, condition, expectation, kl_conditional, kl_divergence, kl_rows,
                            marginalize, mean_mode, normalize, point_mass, sample, sample_index, uniform)
from core.errors import AbsContinuityViolation, AllZero, BadAxis, NegativeMass, NonFiniteH, NotNormalized
from core.types import ConditionalDensity, Density, Grid, JointDensity


class TestGrid:
    def test_centers_and_edges(self):
        grid = Grid(0.0, 2.0, 4)
        assert_allclose(grid.centers, [0.25, 0.75, 1.25, 1.75])
        assert_allclose(grid.edges, [0.0, 0.5, 1.0, 1.5, 2.0])
        assert grid.width == 0.5

    def test_from_centers(self):
        grid = Grid.from_centers(1.0, 3.0, 3)
        assert_allclose(grid.centers, [1.0, 2.0, 3.0])

    def test_cell_index_edges_and_outside(self):
        grid = Grid(0.0, 2.0, 4)
        assert_array_equal(grid.cell_index([0.0, 0.49, 0.5, 2.0, -0.1, 2.1]), [0, 0, 1, 3, -1, -1])

    def test_nearest_index_clips(self):
        grid = Grid(0.0, 2.0, 4)
        assert_array_equal(grid.nearest_index([-5.0, 0.7, 99.0]), [0, 1, 3])

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            Grid(1.0, 1.0, 3)
        with pytest.raises(ValueError):
            Grid(0.0, 1.0, 1)


class TestDensity:
    def test_normalize(self, two_cells):
        assert_allclose(normalize([1.0, 3.0], two_cells).mass, [0.25, 0.75])

    def test_normalize_errors(self, two_cells):
        with pytest.raises(AllZero):
            normalize([0.0, 0.0], two_cells)
        with pytest.raises(NegativeMass):
            normalize([1.0, -1.0], two_cells)

    def test_unnormalized_mass_rejected(self, two_cells):
        with pytest.raises(NotNormalized):
            Density(two_cells, [0.5, 0.6])

    def test_mass_is_read_only(self, two_cells):
        d = uniform(two_cells)
        with pytest.raises(ValueError):
            d.mass[0] = 1.0

    def test_point_mass_and_mean(self):
        grid = Grid(0.0, 10.0, 10)
        d = point_mass(grid, 3.2)
        assert d.mass[3] == 1.0
        assert mean_mode(d) == pytest.approx(3.5)

    def test_expectation_ignores_uncharged_infinities(self, two_cells):
        d = Density(two_cells, [1.0, 0.0])
        assert expectation(d, [2.0, np.inf]) == 2.0
        with pytest.raises(NonFiniteH):
            expectation(uniform(two_cells), [2.0, np.inf])

    def test_expectation_of_callable(self):
        grid = Grid(0.0, 4.0, 4)
        assert expectation(uniform(grid), lambda z: z ** 2) == pytest.approx(np.mean(grid.centers ** 2))


class TestMarginalizeCondition:
    @pytest.fixture
    def joint(self):
        a, b = Grid(0.0, 2.0, 2), Grid(0.0, 3.0, 3)
        mass = np.array([[0.1, 0.2, 0.1], [0.0, 0.0, 0.6]])
        return JointDensity((a, b), mass)

    def test_marginals(self, joint):
        assert_allclose(marginalize(joint, (1,)).mass, [0.1, 0.2, 0.7])
        assert_allclose(marginalize(joint, (0,)).mass, [0.4, 0.6])

    def test_marginal_axis_order_follows_kept(self, joint):
        swapped = marginalize(joint, (1, 0))
        assert swapped.mass.shape == (3, 2)
        assert_allclose(swapped.mass, joint.mass.T)

    def test_bad_axes(self, joint):
        with pytest.raises(BadAxis):
            marginalize(joint, (2,))
        with pytest.raises(BadAxis):
            marginalize(joint, (0, 0))

    def test_condition_rows(self, joint):
        cond = condition(joint, (0,))
        assert_allclose(cond.table, [[0.25, 0.5, 0.25], [0.0, 0.0, 1.0]])
        assert not cond.flagged.any()

    def test_condition_fills_empty_rows_uniform(self, joint):
        cond = condition(joint, (1,))
        assert_allclose(cond.table[0], [1.0, 0.0])
        assert_allclose(cond.table[1], [1.0, 0.0])
        assert_allclose(cond.table[2], [1.0 / 7.0, 6.0 / 7.0])
        assert not cond.flagged.any()

        sparse = JointDensity(joint.grids, [[0.5, 0.0, 0.5], [0.0, 0.0, 0.0]])
        cond = condition(sparse, (0,))
        assert_array_equal(cond.flagged, [False, True])
        assert_allclose(cond.table[1], np.full(3, 1.0 / 3.0))

    def test_condition_needs_one_target(self):
        g = Grid(0.0, 1.0, 2)
        joint = JointDensity((g, g, g), np.full((2, 2, 2), 0.125))
        with pytest.raises(BadAxis):
            condition(joint, (0,))
        assert condition(joint, (0, 1)).table.shape == (2, 2, 2)

    def test_condition_times_marginal_rebuilds_joint(self, rng):
        for _ in range(50):
            shape = tuple(int(n) for n in rng.integers(2, 7, size=3))
            grids = tuple(Grid(0.0, 1.0, n) for n in shape)
            mass = rng.random(shape)
            mass[rng.random(shape) < 0.2] = 0.0
            joint = JointDensity(grids, mass / mass.sum())
            cond = condition(joint, (0, 2))
            marginal = marginalize(joint, (0, 2))
            rebuilt = np.transpose(marginal.mass[..., None] * cond.table, (0, 2, 1))
            assert_allclose(rebuilt, joint.mass, atol=1e-12)
            assert_array_equal(cond.flagged, marginal.mass <= 0)


class TestKL:
    def test_identity_is_zero(self, rng):
        grid = Grid(0.0, 1.0, 8)
        f = normalize(rng.random(8), grid)
        assert kl_divergence(f, f) == 0.0

    def test_two_cell_value(self, two_cells):
        f = uniform(two_cells)
        g = Density(two_cells, [0.25, 0.75])
        expected = 0.5 * np.log(2.0) + 0.5 * np.log(2.0 / 3.0)
        assert kl_divergence(f, g) == pytest.approx(expected, abs=1e-15)

    def test_zero_log_zero(self, two_cells):
        f = Density(two_cells, [1.0, 0.0])
        g = Density(two_cells, [0.5, 0.5])
        assert kl_divergence(f, g) == pytest.approx(np.log(2.0))

    def test_absolute_continuity(self, two_cells):
        f = uniform(two_cells)
        g = Density(two_cells, [1.0, 0.0])
        with pytest.raises(AbsContinuityViolation):
            kl_divergence(f, g)
        assert np.isfinite(kl_divergence(f, g, support_floor=1e-12))

    def test_conditional_reports_cell(self, two_cells):
        f = ConditionalDensity((two_cells,), two_cells, [[0.5, 0.5], [0.5, 0.5]])
        g = ConditionalDensity((two_cells,), two_cells, [[0.5, 0.5], [1.0, 0.0]])
        with pytest.raises(AbsContinuityViolation) as info:
            kl_conditional(f, g)
        assert info.value.cell == (1,)

    def test_rows_nonnegative(self, rng):
        p = rng.dirichlet(np.ones(5), size=50)
        q = rng.dirichlet(np.ones(5), size=50)
        assert np.all(kl_rows(p, q) >= 0.0)

    def test_chain_rule(self, rng):
        for _ in range(1000):
            na, nb = rng.integers(2, 21, size=2)
            grids = (Grid(0.0, 1.0, int(na)), Grid(0.0, 1.0, int(nb)))
            f = rng.random((na, nb)) + 1e-3
            g = rng.random((na, nb)) + 1e-3
            jf, jg = JointDensity(grids, f / f.sum()), JointDensity(grids, g / g.sum())
            joint = float(kl_rows(jf.mass.ravel(), jg.mass.ravel()))
            marginal, conditional = chain_rule_terms(jf, jg)
            assert abs(joint - (marginal + conditional)) <= 1e-10


class TestSampling:
    def test_frequencies(self):
        rng = np.random.default_rng(1)
        mass = np.array([0.2, 0.0, 0.8])
        draws = np.array([sample_index(mass, rng) for _ in range(10_000)])
        assert not np.any(draws == 1)
        assert abs(np.mean(draws == 2) - 0.8) < 0.02

    def test_point_mass_is_deterministic(self):
        rng = np.random.default_rng(2)
        assert all(sample_index(np.array([0.0, 1.0, 0.0]), rng) == 1 for _ in range(100))

    def test_sample_returns_cell_centers(self):
        grid = Grid(0.0, 30.0, 3)
        f = Density(grid, [0.1, 0.0, 0.9])
        rng = np.random.default_rng(3)
        draws = np.array([sample(f, rng) for _ in range(5_000)])
        assert set(np.unique(draws)) <= {5.0, 25.0}
        assert abs(np.mean(draws == 25.0) - 0.9) < 0.02
        again = np.random.default_rng(3)
        assert [sample(f, again) for _ in range(20)] == list(draws[:20])
