import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from due import baselines as B
from due import datasets as D
from due import gp as G
from due.experiments import MoonsProtocol, far_ring
from due.features import FeatureExtractorConfig
from due.training import TrainConfig


def rff(dim=1, num_features=1024, lengthscale=1.0, seed=0, **kw):
    return B.RFFModel.create(dim, num_features, lengthscale=lengthscale, seed=seed, **kw)


class TestRandomFeatures:
    def test_diagonal_mean(self):
        x = np.random.default_rng(0).standard_normal((200, 2))
        phi = B.rff_features(rff(2, 10_000, outputscale=1.5), x)
        diag = np.sum(phi * phi, axis=1)
        assert abs(diag.mean() - 1.5) < 3 * diag.std() / np.sqrt(len(diag))

    def test_kernel_approximation(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((20, 3)), rng.standard_normal((20, 3))
        model = rff(3, 10_000, lengthscale=1.3)
        approx = np.sum(B.rff_features(model, a) * B.rff_features(model, b), axis=1)
        exact = np.diag(G.kernel_matrix("rbf", 1.3, 1.0, a, b))
        assert np.max(np.abs(approx - exact)) < 0.05

    def test_seeded(self):
        a, b = rff(seed=4), rff(seed=4)
        assert a.omega.tobytes() == b.omega.tobytes() and a.phase.tobytes() == b.phase.tobytes()

    @pytest.mark.parametrize("bad", [dict(num_features=0), dict(lengthscale=0.0), dict(noise=0.0), dict(ridge=-1.0)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            rff(**bad)


class TestRFFPosterior:
    def test_prior_without_data(self):
        model = rff(ridge=2.0, noise=0.05)
        phi = B.rff_features(model, np.array([[0.3], [1.7]]))
        mean, var = B.rff_predict(model, phi)
        np.testing.assert_allclose(mean, 0.0)
        np.testing.assert_allclose(var, np.sum(phi * phi, axis=1) / 2.0 + 0.05)

    def test_closed_form(self):
        model = rff(num_features=8, noise=0.1, ridge=0.5)
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((5, 1)), rng.standard_normal(5)
        phi = B.rff_features(model, x)
        B.rff_fit(model, phi, y)
        precision = 0.5 * np.eye(8) + phi.T @ phi / 0.1
        np.testing.assert_allclose(model.weight_mean, np.linalg.solve(precision, phi.T @ y / 0.1))
        np.testing.assert_allclose(model.weight_cov, np.linalg.inv(precision), rtol=1e-8)

    @pytest.mark.parametrize("copies", [2, 5])
    def test_duplicates_shrink_variance(self, copies):
        data = D.gen_gap_regression(50, 0)
        model = rff(num_features=64)
        phi = B.rff_features(model, data.X)
        test = B.rff_features(model, np.linspace(-6, 6, 25)[:, None])
        _, once = B.rff_predict(B.rff_fit(model, phi, data.Y), test)
        _, many = B.rff_predict(B.rff_fit(model, np.tile(phi, (copies, 1)), np.tile(data.Y, (copies, 1))), test)
        assert np.all(many < once)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000), st.integers(1, 40), st.integers(1, 40))
    def test_nested_data_never_increases_variance(self, seed, n_small, extra):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-6, 6, (n_small + extra, 1))
        y = np.sin(x[:, 0])
        model = rff(num_features=32, seed=seed)
        phi = B.rff_features(model, x)
        test = B.rff_features(model, rng.uniform(-6, 6, (10, 1)))
        _, small = B.rff_predict(B.rff_fit(model, phi[:n_small], y[:n_small]), test)
        _, large = B.rff_predict(B.rff_fit(model, phi, y), test)
        assert np.all(large <= small + 1e-10)

    def test_concentration_on_replicated_data(self):
        # a length scale of 2 puts the gap three length scales wide
        data = D.gen_gap_regression(1000, 0)
        model = rff(lengthscale=2.0)
        phi = B.rff_features(model, data.X)
        gap = B.rff_features(model, np.linspace(-2.9, 2.9, 100)[:, None])
        latent = []
        for copies in (1, 100):
            fit = B.rff_fit(model, np.tile(phi, (copies, 1)), np.tile(data.Y, (copies, 1)))
            latent.append(np.mean(B.rff_predict(fit, gap)[1] - model.noise))
        assert latent[1] / latent[0] < 0.2


class TestEnsemble:
    def test_identical_members(self):
        _, var = B.mixture_moments(np.full((4, 3), 0.7), np.full((4, 3), 0.2))
        np.testing.assert_allclose(var, 0.2)

    def test_two_members(self):
        mean, var = B.mixture_moments([[1.0], [-1.0]], [[0.0], [0.0]])
        assert mean[0] == 0.0 and var[0] == pytest.approx(1.0)

    @given(st.integers(0, 10_000), st.integers(2, 8))
    def test_variance_at_least_member_average(self, seed, k):
        rng = np.random.default_rng(seed)
        means, variances = rng.normal(0, 3, (k, 5)), rng.uniform(0, 2, (k, 5))
        _, var = B.mixture_moments(means, variances)
        assert np.all(var >= variances.mean(axis=0) - 1e-9)

    def test_needs_two_members(self):
        with pytest.raises(ValueError):
            B.EnsembleModel([])

    def test_gap_variance_exceeds_support(self):
        data = D.gen_gap_regression(300, 0)
        cfg = TrainConfig(optimizer="adam", lr=0.01, epochs=150, batch_size=64, seed=0)
        model = B.ensemble_train(FeatureExtractorConfig(1, 32, 2), cfg, data.X, data.Y, members=10)
        _, support = B.ensemble_predict(model, data.X)
        _, gap = B.ensemble_predict(model, np.linspace(-2.5, 2.5, 50)[:, None])
        assert support.mean() < gap.mean()


class TestSoftmaxNet:
    def test_separable_blobs(self):
        data = D.gen_blobs_grid(0)
        x = data.X + np.array([[2.0, 0.0]]) * (2 * data.labels[:, None] - 1)
        cfg = TrainConfig(optimizer="adam", lr=0.01, epochs=30, batch_size=50)
        net = B.softmax_net_train(FeatureExtractorConfig(2, 32, 2), cfg, x, data.labels, 2)
        pred = B.softmax_net_predict(net, x)
        assert np.mean(pred.probs.argmax(axis=1) == data.labels) == 1.0
        np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0, atol=1e-9)

    def test_far_field_confident_on_moons(self):
        p = MoonsProtocol(epochs=300)
        data = D.gen_two_moons(p.n, p.noise_std, 0)
        cfg = TrainConfig(optimizer="sgd", lr=p.lr, momentum=p.momentum, epochs=p.epochs, batch_size=p.batch_size)
        net = B.softmax_net_train(FeatureExtractorConfig(2, 128, 4, 0.95), cfg, data.X, data.labels, 2)
        ring = far_ring(data.X, p.ring_factor, p.ring_points)
        assert B.softmax_net_predict(net, ring).entropy.mean() < 0.15

    def test_no_spectral_constraint(self):
        cfg = TrainConfig(epochs=1, batch_size=10)
        x = np.random.default_rng(0).standard_normal((20, 2))
        net = B.softmax_net_train(FeatureExtractorConfig(2, 8, 1), cfg, x, np.arange(20) % 2, 2)
        assert net.extractor.config.spectral_normalization is False
        assert len(net.history) == 1
