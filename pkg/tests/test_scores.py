"""Tests for nuisance estimation and the efficient and robust scores."""

import numpy as np
import pytest


@pytest.fixture(scope="module")
def small(linear_data):
    return linear_data.dataset.subset(np.arange(150))


@pytest.fixture(scope="module")
def spec():
    from inner_envelope.kernel import KernelSpec

    return KernelSpec("biweight", 6.0)


class TestNuisances:
    """Delta1, Delta2 and the kernel gradients."""

    def test_delta2_lies_in_s2(self, small, theta_star, spec):
        from inner_envelope.scores import estimate_delta2
        from inner_envelope.subspace import residual_projection, theta_to_bases

        delta2 = estimate_delta2(small, theta_star, spec)
        S2 = theta_to_bases(theta_star).S2
        assert delta2.shape == (small.n, 4)
        assert np.allclose(delta2 @ residual_projection(S2), 0.0, atol=1e-10)

    def test_delta1_with_huge_bandwidth_is_centered_y(self, small):
        """Flat weights make the regression the sample mean, which is zero."""
        from inner_envelope.kernel import KernelSpec
        from inner_envelope.scores import estimate_delta1

        delta1 = estimate_delta1(small, KernelSpec("biweight", 1e5))
        assert np.allclose(delta1, small.Y, atol=1e-3)

    def test_global_nuisances_have_gradients(self, small, theta_star, spec):
        from inner_envelope.scores import global_nuisances, local_nuisances

        nuis = global_nuisances(small, theta_star, spec)
        fields = nuis.gradients
        assert fields.eta1.shape == (small.n, 1)
        assert fields.eta2_B.shape == (small.n, 1)
        assert fields.eta2_B0.shape == (small.n, 2)
        assert fields.eta3.shape == (small.n, 2)
        assert local_nuisances(small, theta_star, spec).gradients is None

    def test_plan_accessors(self, spec):
        from inner_envelope.scores import SMOOTHERS, SmootherPlan

        plan = SmootherPlan.uniform(spec)
        assert plan.spec("eta3").bandwidth == 6.0
        assert set(plan.to_dict()) == {"family", *SMOOTHERS}
        with pytest.raises(ValueError):
            plan.spec("delta3")

    @pytest.mark.slow
    def test_select_bandwidths_positive(self, small, theta_star):
        from inner_envelope.scores import SMOOTHERS, select_bandwidths

        plan = select_bandwidths(small, theta_star, "epanechnikov")
        assert plan.family == "epanechnikov"
        assert all(getattr(plan, name) > 0 for name in SMOOTHERS)


class TestScores:
    """Score assembly and the two robust-score paths."""

    def test_efficient_score_shape(self, small, theta_star, spec):
        from inner_envelope.scores import efficient_score_global, global_nuisances

        scores = efficient_score_global(theta_star, small, global_nuisances(small, theta_star, spec))
        assert scores.shape == (small.n, theta_star.q)
        assert np.all(np.isfinite(scores))

    def test_b_block_ignores_eta2_gradients(self, small, theta_star, spec, rng):
        """The b block is built from Delta2 and the eta3 gradient only."""
        from inner_envelope.scores import GradientFields, efficient_score_global, global_nuisances

        nuis = global_nuisances(small, theta_star, spec)
        n_gamma = theta_star.gamma.vec.size
        base = efficient_score_global(theta_star, small, nuis)
        fields = nuis.gradients
        scrambled = GradientFields(
            rng.standard_normal(fields.eta1.shape),
            rng.standard_normal(fields.eta2_B.shape),
            rng.standard_normal(fields.eta2_B0.shape),
            fields.eta3,
        )
        other = efficient_score_global(theta_star, small, nuis.with_gradients(scrambled))
        assert np.array_equal(other[:, n_gamma:], base[:, n_gamma:])
        assert not np.allclose(other[:, :n_gamma], base[:, :n_gamma])

    def test_b_block_vanishes_without_delta2(self, small, theta_star, spec):
        from dataclasses import replace

        from inner_envelope.scores import efficient_score_global, global_nuisances

        nuis = global_nuisances(small, theta_star, spec)
        zeroed = replace(nuis, delta2=np.zeros_like(nuis.delta2))
        scores = efficient_score_global(theta_star, small, zeroed)
        assert np.all(scores[:, theta_star.gamma.vec.size:] == 0.0)
        assert np.any(scores[:, : theta_star.gamma.vec.size] != 0.0)

    def test_efficient_score_needs_gradients(self, small, theta_star, spec):
        from inner_envelope.scores import efficient_score_global, local_nuisances

        with pytest.raises(ValueError):
            efficient_score_global(theta_star, small, local_nuisances(small, theta_star, spec))

    def test_robust_score_needs_model_or_centering(self, small, theta_star, spec):
        from inner_envelope.scores import local_nuisances, robust_score

        with pytest.raises(ValueError):
            robust_score(theta_star, small, None, local_nuisances(small, theta_star, spec))

    def test_closed_form_matches_general_path(self, small, theta_star, spec, rng):
        """Normal working gradients centred exactly give the closed-form robust score."""
        from inner_envelope.scores import (
            fit_normal_working,
            local_nuisances,
            normal_conditional_expectations,
            robust_score,
            working_gradients,
        )
        from inner_envelope.subspace import Theta

        for theta in (theta_star, Theta.from_vector(theta_star.vector + 0.1 * rng.standard_normal(5), 4, 1, 1)):
            wm = fit_normal_working(theta, small)
            nuis = local_nuisances(small, theta, spec)
            shortcut = robust_score(theta, small, wm, nuis)
            general_nuis = nuis.with_gradients(working_gradients(wm, theta, small))
            general_nuis = general_nuis.with_centering(normal_conditional_expectations(wm, theta, small, nuis))
            general = robust_score(theta, small, None, general_nuis)
            assert np.allclose(shortcut, general, atol=1e-9)

    def test_kernel_centering_path_runs(self, small, theta_star, spec):
        from inner_envelope.scores import (
            conditional_expectations,
            fit_normal_working,
            local_nuisances,
            robust_score,
            working_gradients,
        )

        wm = fit_normal_working(theta_star, small)
        fields = working_gradients(wm, theta_star, small)
        nuis = local_nuisances(small, theta_star, spec).with_gradients(fields)
        nuis = nuis.with_centering(conditional_expectations(fields, theta_star, small, spec))
        scores = robust_score(theta_star, small, None, nuis)
        assert scores.shape == (small.n, 5)
        assert np.all(np.isfinite(scores))


class TestConditionalExpectations:
    """Kernel centering of the working gradients."""

    def test_constant_fields_are_reproduced(self, small, theta_star, spec):
        from inner_envelope.scores import GradientFields, conditional_expectations

        n = small.n
        fields = GradientFields(
            np.full((n, 1), 2.5),
            np.full((n, 1), -1.0),
            np.tile([0.3, -0.7], (n, 1)),
            np.tile([4.0, 1.0], (n, 1)),
        )
        centering = conditional_expectations(fields, theta_star, small, spec)
        assert np.allclose(centering.eta1, 2.5, atol=1e-12)
        assert np.allclose(centering.eta2_B, -1.0, atol=1e-12)
        assert np.allclose(centering.eta2_B0, [0.3, -0.7], atol=1e-12)
        assert np.allclose(centering.eta3_mean, [4.0, 1.0], atol=1e-12)

    def test_matches_brute_force_regression(self, small, theta_star, rng):
        from inner_envelope.kernel import KernelSpec, SmootherInput, kernel_eval
        from inner_envelope.scores import GradientFields, conditional_expectations
        from inner_envelope.subspace import theta_to_bases

        tiny = small.subset(np.arange(25))
        n = tiny.n
        fields = GradientFields(
            rng.standard_normal((n, 1)),
            rng.standard_normal((n, 1)),
            rng.standard_normal((n, 2)),
            rng.standard_normal((n, 2)),
        )
        spec = KernelSpec("epanechnikov", 8.0)
        centering = conditional_expectations(fields, theta_star, tiny, spec)

        def brute(points, values):
            z = SmootherInput.from_points(points).z
            out = np.empty_like(values)
            for i in range(n):
                w = np.ones(n)
                for j in range(z.shape[1]):
                    w *= kernel_eval((z[i, j] - z[:, j]) / spec.bandwidth, spec.family)
                out[i] = w @ values / w.sum()
            return out

        bases = theta_to_bases(theta_star)
        c = tiny.Y @ bases.Gamma0.mat @ bases.B0.mat
        cx = np.hstack([c, tiny.X])
        assert np.allclose(centering.eta1, brute(tiny.X, fields.eta1), atol=1e-10)
        assert np.allclose(centering.eta2_B, brute(cx, fields.eta2_B), atol=1e-10)
        assert np.allclose(centering.eta2_B0, brute(cx, fields.eta2_B0), atol=1e-10)
        assert np.allclose(centering.eta3_mean, fields.eta3.mean(axis=0))


class TestWorkingModel:
    """Normal working model fits and jitter."""

    def test_working_model_shapes(self, small, theta_star):
        from inner_envelope.scores import fit_normal_working

        wm = fit_normal_working(theta_star, small)
        assert wm.zeta1.shape == (1, 2)
        assert wm.zeta2.shape == (1, 2)
        assert wm.Omega0.shape == (3, 3)
        assert wm.mu2.shape == (2, 1)
        assert wm.Sigma2.shape == (1, 1)

    def test_gradients_match_finite_differences(self, small, theta_star, rng):
        """Each closed-form field is the derivative of its normal log-density."""
        from scipy.stats import multivariate_normal

        from inner_envelope.scores import fit_normal_working, working_gradients
        from inner_envelope.subspace import Theta, theta_to_bases

        theta = Theta.from_vector(theta_star.vector + 0.2 * rng.standard_normal(theta_star.q), 4, 1, 1)
        wm = fit_normal_working(theta, small)
        fields = working_gradients(wm, theta, small)
        bases = theta_to_bases(theta)
        y0 = small.Y @ bases.Gamma0.mat
        t1, t2, c = small.Y @ bases.Gamma.mat, y0 @ bases.B.mat, y0 @ bases.B0.mat
        m33 = bases.B0.mat.T @ wm.Omega0 @ bases.B0.mat

        def log_eta1(t, x):
            return multivariate_normal.logpdf(t, wm.zeta1 @ x, wm.Omega)

        def log_eta2(t, cc, x):
            return multivariate_normal.logpdf(t, wm.zeta2 @ x + wm.mu2.T @ cc, wm.Sigma2)

        def log_eta3(cc):
            return multivariate_normal.logpdf(cc, np.zeros(cc.size), m33)

        def central(fun, point):
            step = 1e-3
            grad = np.empty(point.size)
            for j in range(point.size):
                e = np.zeros(point.size)
                e[j] = step
                grad[j] = (fun(point + e) - fun(point - e)) / (2 * step)
            return grad

        for i in rng.choice(small.n, 6, replace=False):
            x = small.X[i]
            assert np.allclose(fields.eta1[i], central(lambda t: log_eta1(t, x), t1[i]), atol=1e-8)
            assert np.allclose(fields.eta2_B[i], central(lambda t: log_eta2(t, c[i], x), t2[i]), atol=1e-8)
            assert np.allclose(fields.eta2_B0[i], central(lambda cc: log_eta2(t2[i], cc, x), c[i]), atol=1e-8)
            assert np.allclose(fields.eta3[i], central(log_eta3, c[i]), atol=1e-8)

    def test_singular_residual_covariance_jitters(self, small, theta_star):
        """A duplicated response leaves Omega0 singular; a ridge is added with a warning."""
        from inner_envelope.dataset import Dataset
        from inner_envelope.errors import JitterWarning
        from inner_envelope.scores import fit_normal_working

        X, Y = small.raw()
        Y = Y.copy()
        Y[:, 3] = Y[:, 2]
        with pytest.warns(JitterWarning):
            fit_normal_working(theta_star, Dataset.from_arrays(X, Y))


class TestSandwich:
    def test_identity_jacobian(self, rng):
        from inner_envelope.scores import local_sandwich

        scores = rng.standard_normal((100, 3))
        cov = local_sandwich(scores, np.eye(3))
        assert np.allclose(cov, scores.T @ scores / 100 / 100)
        assert np.all(np.linalg.eigvalsh(cov) >= -1e-15)

    def test_singular_jacobian_falls_back(self, rng):
        from inner_envelope.scores import local_sandwich

        cov = local_sandwich(rng.standard_normal((50, 2)), np.zeros((2, 2)))
        assert np.allclose(cov, 0.0)
