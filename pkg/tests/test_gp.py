import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from due import gp as G
from due.datasets import gen_two_moons
from due.selfcheck import oracle_problem
from due.training import fit_variational


def make_gp(m=3, dim=2, outputs=1, kernel="rbf", lengthscale=1.0, outputscale=1.0, seed=0, likelihood=None):
    z = np.random.default_rng(seed).standard_normal((m, dim))
    return G.SVGP(z, outputs, kernel, lengthscale, outputscale, likelihood)


def randomize(gp, rng, scale=0.5):
    gp.q_mean.data = scale * rng.standard_normal(gp.q_mean.shape)
    gp.q_tril.data = scale * rng.standard_normal(gp.q_tril.shape)
    gp.q_log_diag.data = scale * rng.standard_normal(gp.q_log_diag.shape)


class TestKernels:
    @pytest.mark.parametrize("kind", G.KERNELS)
    def test_diagonal_is_outputscale(self, kind):
        x = np.random.default_rng(0).standard_normal((4, 3))
        k = G.kernel_eval(kind, 0.7, 2.5, x, x).data
        np.testing.assert_allclose(np.diag(k), 2.5)

    def test_rbf_at_one_lengthscale(self):
        k = G.kernel_eval("rbf", 2.0, 1.0, np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]])).data
        assert k[0, 0] == pytest.approx(0.60653, abs=1e-5)

    def test_matern_closed_form(self):
        d, l = 1.3, 0.9
        k = G.kernel_eval("matern32", l, 1.0, np.array([[0.0]]), np.array([[d]])).data[0, 0]
        r = math.sqrt(3) * d / l
        assert k == pytest.approx((1 + r) * math.exp(-r))

    @pytest.mark.parametrize("kind", G.KERNELS)
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_gram_psd(self, kind, seed):
        x = np.random.default_rng(seed).standard_normal((6, 3))
        k = G.kernel_eval(kind, 1.1, 1.0, x, x).data
        np.testing.assert_allclose(k, k.T)
        assert np.linalg.eigvalsh(k).min() >= -1e-10

    def test_plain_matches_autodiff(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 2)), rng.standard_normal((5, 2))
        for kind in G.KERNELS:
            np.testing.assert_allclose(G.kernel_matrix(kind, 0.8, 1.7, a, b),
                                       G.kernel_eval(kind, 0.8, 1.7, a, b).data, atol=1e-12)

    def test_unknown_kernel(self):
        with pytest.raises(ValueError):
            G.kernel_eval("linear", 1.0, 1.0, np.zeros((1, 1)), np.zeros((1, 1)))


class TestInit:
    def test_single_pair(self):
        assert G.init_lengthscale([[0.0, 0.0], [3.0, 0.0]]) == pytest.approx(3.0)

    def test_collinear(self):
        assert G.init_lengthscale([[0.0], [1.0], [2.0]]) == pytest.approx(4 / 3)

    def test_degenerate_fallback(self):
        assert G.init_lengthscale(np.ones((5, 2))) == 1.0

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            G.init_lengthscale([[1.0]])

    def test_inducing_all_points(self):
        f = np.random.default_rng(0).standard_normal((6, 2))
        z = G.init_inducing(f, 6)
        np.testing.assert_allclose(np.sort(z, axis=0), np.sort(f, axis=0))

    def test_inducing_on_moons(self):
        x = gen_two_moons(200, 0.1, 0).X
        z = G.init_inducing(x, 4, seed=3)
        diameter = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1)).max()
        nearest = np.sqrt(((z[:, None] - x[None]) ** 2).sum(-1)).min(axis=1)
        assert np.all(nearest < diameter / 2)
        np.testing.assert_array_equal(z, G.init_inducing(x, 4, seed=3))

    def test_inducing_too_many(self):
        with pytest.raises(ValueError):
            G.init_inducing(np.zeros((3, 2)), 4)


class TestPredict:
    def test_prior_state(self):
        gp = make_gp(outputscale=1.7)
        gp.mean_const.data = np.array([0.4])
        pred = G.svgp_predict(gp, np.random.default_rng(1).standard_normal((8, 2)))
        np.testing.assert_allclose(pred.mean, 0.4, atol=1e-10)
        np.testing.assert_allclose(pred.variance, 1.7, atol=1e-8)

    def test_tiny_outputscale(self):
        gp = make_gp(outputscale=1e-12)
        randomize(gp, np.random.default_rng(0))
        pred = G.svgp_predict(gp, np.random.default_rng(1).standard_normal((5, 2)))
        np.testing.assert_allclose(pred.mean, 0.0, atol=1e-5)
        np.testing.assert_allclose(pred.variance, G.VAR_FLOOR, atol=1e-10)

    def test_reverts_to_prior_far_away(self):
        gp = make_gp(outputscale=2.0)
        randomize(gp, np.random.default_rng(2))
        pred = G.svgp_predict(gp, np.full((3, 2), 40.0))
        np.testing.assert_allclose(pred.variance, 2.0, atol=1e-6)
        np.testing.assert_allclose(pred.mean, 0.0, atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), shrink=st.floats(0.0, 0.99))
    def test_variance_shrinks_with_covariance(self, seed, shrink):
        rng = np.random.default_rng(seed)
        gp = make_gp(m=4, seed=seed)
        randomize(gp, rng)
        f = rng.standard_normal((10, 2))
        before = G.svgp_predict(gp, f).variance
        gp.q_tril.data *= shrink
        gp.q_log_diag.data += math.log(max(shrink, 1e-6))
        after = G.svgp_predict(gp, f).variance
        assert np.all(after <= before + 1e-12)
        assert np.all(after >= G.VAR_FLOOR)

    def test_oracle_tight(self):
        x, y = oracle_problem(0)
        gp = G.SVGP(x, 1, "rbf", 1.0, 1.0, G.GaussianLikelihood.create(0.01))
        fit_variational(gp, x, y)
        xt = np.linspace(-4, 4, 50)[:, None]
        ex_mean, ex_var = G.exact_gp_predict("rbf", 1.0, 1.0, x, y[:, 0], 0.01, xt)
        pred = G.svgp_predict(gp, xt)
        assert np.max(np.abs(pred.mean[:, 0] - ex_mean)) < 1e-3
        assert np.max(np.abs(pred.variance[:, 0] - ex_var)) < 1e-3

    def test_multi_output_shapes(self):
        gp = make_gp(outputs=3, likelihood=G.SoftmaxLikelihood(3))
        pred = G.svgp_predict(gp, np.zeros((5, 2)))
        assert pred.mean.shape == pred.variance.shape == (5, 3)

    def test_predict_pair_marginals(self):
        gp = make_gp(m=4)
        randomize(gp, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        fa, fb = rng.standard_normal((7, 2)), rng.standard_normal((7, 2))
        pair = gp.predict_pair(fa, fb)
        pa, pb = G.svgp_predict(gp, fa), G.svgp_predict(gp, fb)
        np.testing.assert_allclose(pair["mean_a"], pa.mean[:, 0])
        np.testing.assert_allclose(pair["var_b"], pb.variance[:, 0])
        same = gp.predict_pair(fa, fa)
        np.testing.assert_allclose(same["cov_ab"], same["var_a"], atol=1e-10)


class TestKL:
    def test_prior_is_zero(self):
        assert G.kl_whitened(make_gp()).item() == pytest.approx(0.0, abs=1e-12)

    def test_scaled_identity(self):
        gp = make_gp(m=2)
        gp.q_log_diag.data[:] = math.log(2.0)
        assert G.kl_whitened(gp).item() == pytest.approx(3 - 2 * math.log(2), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        gp = make_gp(m=4, outputs=2)
        randomize(gp, np.random.default_rng(seed))
        assert G.kl_whitened(gp).item() >= 0

    def test_matches_gaussian_formula(self):
        gp = make_gp(m=3)
        randomize(gp, np.random.default_rng(3))
        s = gp.q_sqrt(0).data
        cov = s @ s.T
        mu = gp.q_mean.data[0]
        expected = 0.5 * (np.trace(cov) + mu @ mu - 3 - np.linalg.slogdet(cov)[1])
        assert G.kl_whitened(gp).item() == pytest.approx(expected)


class TestElbo:
    def test_hand_formula(self):
        gp = make_gp(m=2, likelihood=G.GaussianLikelihood.create(0.3))
        f = np.array([[0.1, -0.2], [1.0, 0.5]])
        y = np.array([[0.7], [-0.4]])
        pred = G.svgp_predict(gp, f)
        mean, var = pred.mean[:, 0], pred.variance[:, 0]
        expected = np.sum(-0.5 * np.log(2 * np.pi * 0.3) - ((y[:, 0] - mean) ** 2 + var) / (2 * 0.3))
        terms = G.elbo(gp, f, y, 2)
        assert terms.kl.item() == pytest.approx(0.0, abs=1e-12)
        assert terms.elbo.item() == pytest.approx(expected, rel=1e-10)

    def test_minibatch_scaling(self):
        gp = make_gp(m=2, likelihood=G.GaussianLikelihood.create(0.3))
        randomize(gp, np.random.default_rng(0))
        f, y = np.zeros((2, 2)), np.ones((2, 1))
        small, big = G.elbo(gp, f, y, 2), G.elbo(gp, f, y, 20)
        assert big.expected_log_lik.item() == pytest.approx(10 * small.expected_log_lik.item())
        assert big.kl.item() == pytest.approx(small.kl.item())

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            G.elbo(make_gp(), np.zeros((0, 2)), np.zeros((0, 1)), 1)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_bounded_by_exact_marginal(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((8, 2))
        y = rng.standard_normal((8, 1))
        gp = G.SVGP(rng.standard_normal((4, 2)), 1, "rbf", 0.9, 1.3, G.GaussianLikelihood.create(0.2))
        randomize(gp, rng)
        gp.mean_const.data = np.array([0.3])
        gram = G.kernel_matrix("rbf", 0.9, 1.0, x, x)
        exact = G.exact_gp_marginal(gram, y[:, 0], 1.3, 0.2, 0.3).total
        assert G.elbo(gp, x, y, 8).elbo.item() <= exact + 1e-9

    def test_tight_at_optimum(self):
        x, y = oracle_problem(0)
        gp = G.SVGP(x, 1, "rbf", 1.0, 1.0, G.GaussianLikelihood.create(0.01))
        value = fit_variational(gp, x, y)
        exact = G.exact_gp_marginal(G.kernel_matrix("rbf", 1.0, 1.0, x, x), y[:, 0], 1.0, 0.01).total
        assert abs(value - exact) < 1e-2

    def test_softmax_seeded(self):
        gp = make_gp(outputs=3, likelihood=G.SoftmaxLikelihood(3, mc_samples=8))
        randomize(gp, np.random.default_rng(0))
        f = np.random.default_rng(1).standard_normal((5, 2))
        y = np.array([0, 1, 2, 1, 0])
        a = G.elbo(gp, f, y, 5, np.random.default_rng(4)).elbo.item()
        b = G.elbo(gp, f, y, 5, np.random.default_rng(4)).elbo.item()
        assert a == b and a < 0


class TestClassification:
    def test_zero_variance_is_softmax(self):
        mean = np.array([[1.0, 2.0, 0.5]])
        probs, cls = G.predictive_class_probs(mean, np.zeros_like(mean))
        expected = np.exp(mean) / np.exp(mean).sum()
        np.testing.assert_allclose(probs, expected, rtol=1e-14)
        assert cls[0] == 1

    def test_symmetric_means_uniform(self):
        samples = 10_000
        mean, var = np.zeros((1, 3)), np.full((1, 3), 2.0)
        rng = np.random.default_rng(0)
        probs, _ = G.predictive_class_probs(mean, var, samples, rng)
        draws = G._softmax(np.sqrt(2.0) * np.random.default_rng(1).standard_normal((samples, 3)))
        se = draws.std(axis=0) / np.sqrt(samples)
        assert np.all(np.abs(probs[0] - 1 / 3) < 3 * se)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_rows_normalized(self, seed):
        rng = np.random.default_rng(seed)
        probs, _ = G.predictive_class_probs(rng.normal(0, 5, (6, 4)), rng.uniform(0, 3, (6, 4)), 32, rng)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("p,h", [([0.5, 0.5], math.log(2)), ([1.0, 0.0], 0.0), ([0.9, 0.1], 0.3251)])
    def test_entropy(self, p, h):
        assert G.predictive_entropy(np.array([p]))[0] == pytest.approx(h, abs=1e-4)

    def test_classify(self):
        gp = make_gp(outputs=2, likelihood=G.SoftmaxLikelihood(2))
        pred = G.classify(gp, np.zeros((4, 2)), rng=np.random.default_rng(0))
        assert pred.entropy.shape == (4,)
        assert np.all(pred.entropy <= math.log(2) + 1e-12)


class TestExactGP:
    def test_standard_normal(self):
        ml = G.exact_gp_marginal(np.eye(4), np.zeros(4), 1.0, 0.0)
        assert ml.data_fit == 0.0 and ml.complexity == pytest.approx(0.0)
        assert ml.total == pytest.approx(-2 * math.log(2 * math.pi))

    def test_scalar(self):
        ml = G.exact_gp_marginal(np.ones((1, 1)), np.array([math.sqrt(2)]), 1.0, 1.0)
        assert ml.data_fit == pytest.approx(-0.5)
        assert ml.complexity == pytest.approx(-0.5 * math.log(2))
        assert ml.complexity_penalty == pytest.approx(0.5 * math.log(2))

    def test_matches_scipy_density(self):
        from scipy.stats import multivariate_normal

        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((6, 2)), rng.standard_normal(6)
        k = G.kernel_matrix("matern32", 1.2, 1.0, x, x)
        ml = G.exact_gp_marginal(k, y, 0.7, 0.1, 0.2)
        expected = multivariate_normal(np.full(6, 0.2), 0.7 * k + 0.1 * np.eye(6)).logpdf(y)
        assert ml.total == pytest.approx(expected)

    @pytest.mark.parametrize("seed", range(3))
    def test_optimal_scale_data_fit(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((30, 2)), rng.standard_normal(30)
        _, ml = G.optimize_signal_scale(G.kernel_matrix("rbf", 1.0, 1.0, x, x), y, 0.05)
        assert ml.data_fit == pytest.approx(-15.0, abs=1e-6)

    def test_interpolates(self):
        x = np.array([[0.0], [1.0], [2.5]])
        y = np.array([0.3, -1.0, 2.0])
        mean, var = G.exact_gp_predict("rbf", 1.0, 1.0, x, y, 1e-10, x)
        np.testing.assert_allclose(mean, y, atol=1e-6)
        np.testing.assert_allclose(var, 0.0, atol=1e-6)

    def test_prior_reversion(self):
        x = np.array([[0.0], [1.0]])
        mean, var = G.exact_gp_predict("rbf", 0.5, 2.0, x, np.array([1.0, 2.0]), 0.01, np.array([[50.0]]))
        assert var[0] == pytest.approx(2.0, abs=1e-6)
        assert mean[0] == pytest.approx(0.0, abs=1e-6)

    def test_collapse_path_monotone(self):
        rng = np.random.default_rng(0)
        x = np.vstack([[10.0, 10.0], [12.0, 10.0], rng.uniform(-3, 3, (10, 2))])
        y = np.concatenate([[0.5, 0.5], np.sin(x[2:, 0])])
        path = G.collapse_path("rbf", 1.0, x, y, steps=10)
        penalty = np.array([s.marginal.complexity_penalty for s in path])
        assert np.all(np.diff(penalty) < 0)
        assert path[0].fraction == 0.0 and path[-1].fraction == 1.0
