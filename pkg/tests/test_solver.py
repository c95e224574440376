"""Tests for the estimating-equation solvers and the method front door."""

import warnings

import numpy as np
import pytest


@pytest.fixture(scope="module")
def small(linear_data):
    return linear_data.dataset.subset(np.arange(150))


@pytest.fixture(scope="module")
def spec():
    from inner_envelope.kernel import KernelSpec

    return KernelSpec("biweight", 6.0)


def _quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)


class TestSolverConfig:
    def test_defaults(self):
        from inner_envelope.solver import SolverConfig

        cfg = SolverConfig()
        assert cfg.delta == 1e-6
        assert cfg.max_outer == 100
        assert cfg.step_bound == pytest.approx(100.0)

    def test_step_bound_shrinks_with_damping(self):
        from inner_envelope.solver import SolverConfig

        assert SolverConfig(lm_lambda0=1.0).step_bound == pytest.approx(0.1)
        assert SolverConfig(lm_lambda0=0.01).step_bound == pytest.approx(10.0)

    @pytest.mark.parametrize("kwargs", [{"delta": 0.0}, {"max_outer": 0}, {"lm_lambda0": -1.0}])
    def test_invalid(self, kwargs):
        from inner_envelope.errors import DataError
        from inner_envelope.solver import SolverConfig

        with pytest.raises(DataError):
            SolverConfig(**kwargs)


class TestSolveMeanScore:
    def test_linear_score_root_is_the_mean(self, rng):
        """Scores x_i - theta have their root at the sample mean."""
        from inner_envelope.solver import solve_mean_score
        from inner_envelope.subspace import Theta

        samples = rng.standard_normal((40, 3)) + np.array([0.5, -1.0, 2.0])
        theta, norm, converged = solve_mean_score(lambda t: samples - t.vector, Theta.zeros(3, 1, 1))
        assert converged
        assert np.allclose(theta.vector, samples.mean(axis=0), atol=1e-8)
        assert norm < 1e-8

    def test_already_at_root(self, rng):
        from inner_envelope.solver import solve_mean_score
        from inner_envelope.subspace import Theta

        start = Theta.zeros(3, 1, 1)
        theta, norm, converged = solve_mean_score(lambda t: np.zeros((10, 3)), start)
        assert theta is start
        assert converged and norm == 0.0


class TestFitGlobalLocal:
    """Alternating fits on a small linear sample with a fixed kernel."""

    def test_global_fit_is_monotone(self, small, spec, linear_data):
        from inner_envelope.solver import SolverConfig, fit_global

        result = _quiet(fit_global, small, 1, 1, spec, SolverConfig(max_outer=5, starts=2), init=linear_data.truth)
        assert result.method == "global"
        assert result.score_norm <= result.initial_score_norm + 1e-12
        norms = [step[2] for step in result.trajectory]
        assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))
        assert result.covariance.shape == (5, 5)
        assert result.permutation is None

    def test_local_fit_shortcut_and_general_agree_at_start(self, small, spec, linear_data):
        """Both robust-score paths start from the same mean-score norm."""
        from inner_envelope.solver import SolverConfig, fit_local

        cfg = SolverConfig(max_outer=1, starts=2)
        fast = _quiet(fit_local, small, 1, 1, spec, cfg, init=linear_data.truth)
        slow = _quiet(fit_local, small, 1, 1, spec, cfg, shortcut=False, init=linear_data.truth)
        assert fast.initial_score_norm > 0
        assert np.isfinite(slow.initial_score_norm)
        assert fast.score_norm <= fast.initial_score_norm + 1e-12

    def test_custom_working_model(self, small, spec, linear_data):
        """A user gradient callback drives the general robust score."""
        from inner_envelope.scores import fit_normal_working, working_gradients
        from inner_envelope.solver import SolverConfig, fit_local
        from inner_envelope.subspace import bases_to_theta

        def normal_gradients(bases, data):
            theta = bases_to_theta(bases)
            return working_gradients(fit_normal_working(theta, data), theta, data)

        result = _quiet(
            fit_local,
            small,
            1,
            1,
            spec,
            SolverConfig(max_outer=1, starts=2),
            working="custom",
            gradient_fn=normal_gradients,
            init=linear_data.truth,
        )
        assert result.method == "local"

    def test_working_model_validation(self, small, spec):
        from inner_envelope.errors import DataError
        from inner_envelope.solver import fit_local

        with pytest.raises(DataError):
            fit_local(small, 1, 1, spec, working="student")
        with pytest.raises(DataError):
            fit_local(small, 1, 1, spec, working="custom")

    def test_invalid_dimensions(self, small, spec):
        from inner_envelope.errors import DimensionError
        from inner_envelope.solver import fit_global

        with pytest.raises(DimensionError):
            fit_global(small, 2, 2, spec)

    def test_small_sample_warning(self, linear_data, spec):
        from inner_envelope.errors import SmallSampleWarning
        from inner_envelope.solver import SolverConfig, fit_global

        tiny = linear_data.dataset.subset(np.arange(40))
        with pytest.warns(SmallSampleWarning):
            fit_global(tiny, 1, 1, spec, SolverConfig(max_outer=1), init=linear_data.truth)

    def test_unchartable_start_reorders_responses(self, small, spec):
        """A starting S1 along the last response is fitted on reordered responses."""
        from inner_envelope.solver import SolverConfig, fit_global
        from inner_envelope.subspace import Basis, InnerEnvelopeBases, orth_complement

        e = np.eye(4)
        B = Basis(np.ones(3) / np.sqrt(3.0))
        init = InnerEnvelopeBases(Basis(e[:, 3]), Basis(e[:, :3]), B, orth_complement(B))
        result = _quiet(fit_global, small, 1, 1, spec, SolverConfig(max_outer=1), init=init)
        assert result.permutation[0] == 3
        assert sorted(result.permutation) == [0, 1, 2, 3]
        assert result.bases.r == 4

    def test_bandwidths_chosen_for_named_family(self, small, linear_data):
        from inner_envelope.solver import SolverConfig, fit_global

        result = _quiet(fit_global, small, 1, 1, "epanechnikov", SolverConfig(max_outer=1), init=linear_data.truth)
        assert result.plan.family == "epanechnikov"


class TestFitMethod:
    """The uniform method front door."""

    def test_ols(self, small):
        from inner_envelope.regression import fit_ols
        from inner_envelope.solver import fit_method

        fit = fit_method(small, "ols", 1, 1)
        assert np.allclose(fit.beta.beta, fit_ols(small).beta)
        assert fit.bases is None and fit.converged

    def test_oracle_needs_truth(self, small, linear_data):
        from inner_envelope.errors import DataError
        from inner_envelope.solver import fit_method

        with pytest.raises(DataError):
            fit_method(small, "oracle", 1, 1)
        fit = fit_method(small, "oracle", 1, 1, truth=linear_data.truth)
        assert fit.bases is linear_data.truth
        assert fit.beta.beta.shape == (4, 2)

    @pytest.mark.parametrize("method", ["ols", "pls", "envelope", "oracle"])
    def test_infeasible_dimensions_for_baselines(self, small, linear_data, method):
        from inner_envelope.errors import DimensionError
        from inner_envelope.solver import fit_method

        with pytest.raises(DimensionError):
            fit_method(small, method, 2, 2, truth=linear_data.truth)
        with pytest.raises(DimensionError):
            fit_method(small, method, 0, 1, truth=linear_data.truth)

    def test_unknown_method(self, small):
        from inner_envelope.errors import DataError
        from inner_envelope.solver import fit_method

        with pytest.raises(DataError):
            fit_method(small, "lasso", 1, 1)

    @pytest.mark.parametrize("method", ["pls", "envelope", "innenv", "gmm"])
    def test_baselines_return_coefficients(self, small, method):
        from inner_envelope.solver import SolverConfig, fit_method

        fit = fit_method(small, method, 1, 1, cfg=SolverConfig(starts=2))
        assert fit.method == method
        assert fit.beta.beta.shape == (4, 2)
        if method in ("innenv", "gmm"):
            assert fit.bases is not None
