"""Tests for bootstrap dimension selection and bootstrap standard errors."""

import numpy as np
import pytest


@pytest.fixture
def exact_linear(rng):
    """Responses that are an exact linear function of the predictors."""
    from inner_envelope.dataset import Dataset

    X = rng.standard_normal((60, 2))
    beta = np.array([[1.0, 0.0], [0.5, -1.0], [0.0, 2.0], [1.5, 1.5]])
    return Dataset.from_arrays(X, X @ beta.T)


class TestDimensionGrid:
    @pytest.mark.parametrize(
        "r,expected",
        [(2, []), (3, [(1, 1)]), (4, [(1, 1), (1, 2), (2, 1)])],
    )
    def test_grid(self, r, expected):
        from inner_envelope.modelselect import dimension_grid

        assert dimension_grid(r) == expected

    def test_grid_respects_bounds(self):
        from inner_envelope.modelselect import dimension_grid

        assert all(u >= 1 and d >= 1 and u + d <= 6 for u, d in dimension_grid(7))


class TestSelectDimension:
    def test_needs_twenty_replicates(self, linear_data):
        from inner_envelope.errors import DimensionError
        from inner_envelope.modelselect import select_dimension

        with pytest.raises(DimensionError):
            select_dimension(linear_data.dataset, B=10)

    def test_needs_three_responses(self, rng):
        from inner_envelope.dataset import Dataset
        from inner_envelope.errors import DimensionError
        from inner_envelope.modelselect import select_dimension

        ds = Dataset.from_arrays(rng.standard_normal((40, 2)), rng.standard_normal((40, 2)))
        with pytest.raises(DimensionError):
            select_dimension(ds, B=20)

    def test_unknown_estimator(self, linear_data):
        from inner_envelope.errors import DimensionError
        from inner_envelope.modelselect import select_dimension

        with pytest.raises(DimensionError):
            select_dimension(linear_data.dataset, estimator="ols")

    @pytest.mark.slow
    def test_single_cell_grid(self):
        """With r = 3 the only feasible cell is chosen and its criterion is bounded."""
        from inner_envelope.modelselect import select_dimension
        from inner_envelope.simulate import Scenario, generate
        from inner_envelope.solver import SolverConfig

        ds = generate(Scenario("sec3_linear", 200, seed=4)).dataset
        result = select_dimension(ds, B=20, seed=1, cfg=SolverConfig(starts=2, seed=1))
        assert (result.u_hat, result.d_hat) == (1, 1)
        assert 0.0 <= result.criterion_table[(1, 1)] <= 3.0 + 1e-9
        assert len(result.per_bootstrap[(1, 1)]) >= 10


class TestBootstrapSe:
    def test_exact_fit_has_zero_se(self, exact_linear):
        from inner_envelope.modelselect import bootstrap_se

        result = bootstrap_se(exact_linear, 1, 1, "ols", B=25, seed=3)
        assert result.archive.shape == (25, 4, 2)
        assert np.all(result.se < 1e-8)
        assert result.n_failed == 0

    def test_deterministic_given_seed(self, linear_data):
        from inner_envelope.modelselect import bootstrap_se

        ds = linear_data.dataset
        first = bootstrap_se(ds, 1, 1, "ols", B=20, seed=9)
        second = bootstrap_se(ds, 1, 1, "ols", B=20, seed=9, jobs=4)
        assert np.array_equal(first.archive, second.archive)
        assert np.all(first.se > 0)
        assert np.all((first.p_values >= 0) & (first.p_values <= 1))

    def test_oracle_bootstrap_beats_ols_on_noisy_directions(self, linear_data):
        from inner_envelope.modelselect import bootstrap_se

        ds = linear_data.dataset
        ols = bootstrap_se(ds, 1, 1, "ols", B=40, seed=2)
        oracle = bootstrap_se(ds, 1, 1, "oracle", B=40, seed=2, truth=linear_data.truth)
        assert np.median(oracle.se) < np.median(ols.se)


class TestSeRatioEcdf:
    def test_sorted_with_unit_top(self):
        from inner_envelope.modelselect import se_ratio_ecdf

        ratios, heights = se_ratio_ecdf(np.array([[2.0, 1.0], [3.0, 4.0]]), np.array([[1.0, 1.0], [1.0, 2.0]]))
        assert np.allclose(ratios, [1.0, 2.0, 2.0, 3.0])
        assert np.allclose(heights, [0.25, 0.5, 0.75, 1.0])

    def test_zero_denominator_dropped(self):
        from inner_envelope.modelselect import se_ratio_ecdf

        ratios, heights = se_ratio_ecdf(np.array([1.0, 2.0]), np.array([0.0, 4.0]))
        assert np.allclose(ratios, [0.5])
        assert heights[-1] == 1.0

    def test_shape_mismatch(self):
        from inner_envelope.errors import DimensionError
        from inner_envelope.modelselect import se_ratio_ecdf

        with pytest.raises(DimensionError):
            se_ratio_ecdf(np.ones(3), np.ones(4))
