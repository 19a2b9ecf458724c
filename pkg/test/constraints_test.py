import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.constraints import (active_indices, bound_probability, check_slater, constraint_set, evaluate,
                              interval_mask, max_slack, moment_equality, moment_inequality, normalization,
                              rectangular_bound, satisfied, slater_certificate)
from core.densities import expectation, uniform
from core.errors import EmptyInterval, InfeasibleConstraints
from core.types import ConstraintSet, Density, Grid


@pytest.fixture
def grid():
    """Five cells with centers 0.5 .. 4.5."""
    return Grid(0.0, 5.0, 5)


class TestBuilders:
    def test_normalization(self, grid):
        c = normalization(grid)
        assert c.is_equality
        assert evaluate(c, uniform(grid)) == pytest.approx(0.0)

    def test_moment_equality(self, grid):
        c = moment_equality(2, 9.0, grid)
        assert_allclose(c.h, grid.centers ** 2)
        assert evaluate(c, uniform(grid)) == pytest.approx(np.mean(grid.centers ** 2) - 9.0)
        with pytest.raises(ValueError):
            moment_equality(0, 1.0, grid)

    def test_moment_inequality_senses(self, grid):
        upper = moment_inequality(1, 2.0, grid, "<=")
        lower = moment_inequality(1, 2.0, grid, ">=")
        f = uniform(grid)  # mean 2.5
        assert evaluate(upper, f) == pytest.approx(0.5)
        assert evaluate(lower, f) == pytest.approx(-0.5)
        with pytest.raises(ValueError):
            moment_inequality(1, 2.0, grid, "==")

    def test_rectangular_bound(self, grid):
        upper, lower = rectangular_bound(1, 2.0, 3.0, grid)
        f = uniform(grid)
        assert evaluate(upper, f) < 0 and evaluate(lower, f) < 0
        with pytest.raises(EmptyInterval):
            rectangular_bound(1, 3.0, 2.0, grid)

    def test_bound_probability(self, grid):
        mask = interval_mask(grid, 1.0, 3.0)
        assert_array_equal(mask, [False, True, True, False, False])
        loose = bound_probability(mask, 0.1)
        assert loose.support is None
        assert evaluate(loose, uniform(grid)) == pytest.approx(-0.4 + 0.9)
        hard = bound_probability(mask, 0.0)
        assert_array_equal(hard.support, mask)
        with pytest.raises(ValueError):
            bound_probability(np.zeros(5, dtype=bool), 0.1)

    def test_evaluate_is_affine_in_f(self, grid, rng):
        constraints = [moment_equality(1, 2.0, grid), moment_inequality(2, 6.0, grid, ">="),
                       *rectangular_bound(3, 1.0, 40.0, grid), bound_probability(interval_mask(grid, 1.0, 3.0), 0.2)]
        for _ in range(100):
            f1, f2 = (Density(grid, rng.dirichlet(np.ones(grid.cells))) for _ in range(2))
            t = rng.random()
            mixed = Density(grid, t * f1.mass + (1.0 - t) * f2.mass)
            for c in constraints:
                assert evaluate(c, mixed) == pytest.approx(t * evaluate(c, f1) + (1.0 - t) * evaluate(c, f2),
                                                           abs=1e-10)

    def test_equalities_ordered_first(self, grid):
        cs = constraint_set([moment_inequality(1, 3.0, grid), rectangular_bound(2, 1.0, 9.0, grid),
                             moment_equality(1, 2.5, grid)])
        assert cs.n_e == 1 and cs.n_l == 3
        assert cs.constraints[0].is_equality
        assert cs.equality_indices == (1,)
        assert cs.inequality_indices == (2, 3, 4)


class TestActiveSet:
    def test_tight_inequality_is_active(self, grid):
        f = uniform(grid)
        cs = ConstraintSet((moment_equality(1, 2.5, grid), moment_inequality(1, 2.5, grid),
                            moment_inequality(1, 4.0, grid)))
        assert active_indices(cs, f) == (0, 1, 2)

    def test_satisfied(self, grid):
        cs = ConstraintSet((moment_inequality(1, 3.0, grid),))
        assert satisfied(cs, uniform(grid))
        assert not satisfied(cs, Density(grid, [0, 0, 0, 0, 1.0]))


class TestSlater:
    def test_empty_set_is_feasible(self, grid):
        g = uniform(grid)
        witness = check_slater(ConstraintSet(), g)
        assert_allclose(witness.mass, g.mass)

    def test_max_slack(self, grid):
        cs = ConstraintSet((moment_inequality(1, 1.0, grid),))
        slack, f = max_slack(cs, uniform(grid))
        assert slack == pytest.approx(0.5, abs=1e-9)
        assert expectation(Density(grid, f / f.sum()), grid.centers) == pytest.approx(0.5, abs=1e-9)

    def test_equality_and_inequality_witness(self, grid):
        cs = ConstraintSet((moment_equality(1, 2.0, grid), moment_inequality(2, 6.0, grid)))
        witness = check_slater(cs, uniform(grid))
        assert expectation(witness, grid.centers) == pytest.approx(2.0, abs=1e-8)
        assert expectation(witness, grid.centers ** 2) < 6.0

    def test_boundary_inequality_is_infeasible(self, grid):
        cs = ConstraintSet((moment_inequality(1, 0.5, grid),))
        with pytest.raises(InfeasibleConstraints) as info:
            check_slater(cs, uniform(grid))
        assert info.value.slack == pytest.approx(0.0, abs=1e-9)

    def test_unreachable_equality(self, grid):
        cs = ConstraintSet((moment_equality(1, 10.0, grid),))
        with pytest.raises(InfeasibleConstraints) as info:
            check_slater(cs, uniform(grid))
        assert info.value.slack is None

    def test_reference_support_limits_feasibility(self, grid):
        g = Density(grid, [0.5, 0.5, 0.0, 0.0, 0.0])
        with pytest.raises(InfeasibleConstraints):
            check_slater(ConstraintSet((moment_equality(1, 3.0, grid),)), g)

    def test_support_restriction(self, grid):
        mask = interval_mask(grid, 0.0, 2.0)
        cs = constraint_set([bound_probability(mask, 0.0), moment_equality(1, 0.75, grid)])
        witness = check_slater(cs, uniform(grid))
        assert np.all(witness.mass[~mask] == 0.0)
        assert expectation(witness, grid.centers) == pytest.approx(0.75, abs=1e-8)

    def test_certificate_carries_best_slack(self, grid):
        cs = ConstraintSet((moment_equality(1, 2.0, grid), moment_inequality(2, 6.0, grid)))
        witness, slack = slater_certificate(cs, uniform(grid))
        assert slack == pytest.approx(max_slack(cs, uniform(grid))[0], abs=1e-12)
        assert slack > 0
        assert expectation(witness, grid.centers ** 2) < 6.0

    def test_equalities_only_certificate(self, grid):
        _, slack = slater_certificate(ConstraintSet((moment_equality(1, 2.0, grid),)), uniform(grid))
        assert np.isinf(slack)

    def test_second_moment_witness_within_absolute_tolerance(self):
        speeds = Grid(0.0, 30.0, 30)
        cs = ConstraintSet((moment_equality(2, 250.0, speeds), moment_inequality(1, 16.0, speeds)))
        witness = check_slater(cs, uniform(speeds))
        assert abs(expectation(witness, speeds.centers ** 2) - 250.0) <= 1e-8
        assert expectation(witness, speeds.centers) < 16.0
