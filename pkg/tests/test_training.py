import math

import numpy as np
import pytest

from due import datasets as D
from due import gp as G
from due import training as T
from due.experiments import MoonsProtocol, moons_due_config
from due.features import FeatureExtractorConfig
from due.numcore import Tensor


def toy_config(**kw):
    cfg = dict(optimizer="adam", lr=0.01, epochs=5, batch_size=32, num_inducing=20)
    cfg.update(kw)
    return FeatureExtractorConfig(1, 64, 2, 0.95), T.TrainConfig(**cfg)


def build(fe, cfg, data):
    return T.initialize(T.build_model(fe, cfg), data)


@pytest.fixture(scope="module")
def toy():
    data = D.gen_gap_regression(300, 0)
    fe, cfg = toy_config(epochs=1000, log_full_elbo=True)
    model = build(fe, cfg, data)
    bounds = []
    log = T.train(model, data, callback=lambda m, rec: bounds.append(m.extractor.lipschitz_audit()))
    return data, model, log, bounds


class TestOptimizers:
    def test_zero_gradient(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = T.SGD([p], 0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_sgd_step(self):
        p = Tensor(np.array(3.0), requires_grad=True)
        opt = T.SGD([p], 0.1)
        p.grad = np.array(1.0)
        opt.step()
        assert p.data == pytest.approx(2.9)

    def test_sgd_momentum(self):
        p = Tensor(np.array(0.0), requires_grad=True)
        opt = T.SGD([p], 1.0, momentum=0.5)
        for _ in range(2):
            p.grad = np.array(1.0)
            opt.step()
        assert p.data == pytest.approx(-2.5)

    def test_adam_quadratic(self):
        target = np.array([1.5, -2.0, 0.3])
        p = Tensor(np.zeros(3), requires_grad=True)
        opt = T.Adam([p], 0.01)
        for _ in range(5000):
            opt.zero_grad()
            ((p - target) * (p - target)).sum().backward()
            opt.step()
        np.testing.assert_allclose(p.data, target, atol=1e-4)

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.zeros(3)
        with pytest.raises(ValueError):
            T.Adam([p], 0.1).step()

    def test_unknown(self):
        with pytest.raises(ValueError):
            T.make_optimizer("rmsprop", [], 0.1)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(lr=0), dict(epochs=0), dict(num_inducing=0), dict(likelihood="poisson")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            T.TrainConfig(**bad)


class TestSubstream:
    def test_reproducible(self):
        assert T.substream(3, "data").random() == T.substream(3, "data").random()

    def test_names_independent(self):
        assert T.substream(3, "data").random() != T.substream(3, "weights").random()


class TestInitialize:
    def test_exactly_m_points(self):
        data = D.gen_gap_regression(20, 0)
        fe, cfg = toy_config()
        model = build(fe, cfg, data)
        feats = model.features(data.X).data
        np.testing.assert_allclose(np.sort(model.gp.Z.data, axis=0), np.sort(feats, axis=0), atol=1e-12)

    def test_deterministic(self):
        data = D.gen_two_moons(200, 0.1, 0)
        fe = FeatureExtractorConfig(2, 32, 2)
        cfg = T.TrainConfig(num_inducing=4, likelihood="softmax", num_outputs=2)
        a, b = build(fe, cfg, data), build(fe, cfg, data)
        assert a.gp.Z.data.tobytes() == b.gp.Z.data.tobytes()
        assert a.gp.log_lengthscale.data.tobytes() == b.gp.log_lengthscale.data.tobytes()

    @pytest.mark.parametrize("data", [D.gen_two_moons(200, 0.1, 1), D.gen_gap_regression(300, 1),
                                      D.gen_blobs_grid(1)])
    def test_lengthscale_range(self, data):
        fe = FeatureExtractorConfig(data.X.shape[1], 64, 2)
        model = build(fe, T.TrainConfig(num_inducing=10), data)
        assert 0.1 <= math.exp(model.gp.log_lengthscale.data[0]) <= 10.0

    def test_too_small(self):
        fe, cfg = toy_config()
        with pytest.raises(ValueError):
            build(fe, cfg, D.gen_gap_regression(10, 0))


class TestTrain:
    def test_bitwise_deterministic(self):
        data = D.gen_gap_regression(100, 2)
        fe, cfg = toy_config(epochs=3)
        logs = []
        for _ in range(2):
            model = build(fe, cfg, data)
            logs.append(T.train(model, data))
        strip = lambda log: [(r.elbo, r.kl, r.lengthscale, r.noise) for r in log.records]  # noqa: E731
        assert strip(logs[0]) == strip(logs[1])

    def test_two_moons_accuracy(self):
        protocol = MoonsProtocol()
        data = D.gen_two_moons(protocol.n, protocol.noise_std, 0)
        model = build(*moons_due_config(protocol, 0), data)
        T.train(model, data)
        pred = model.predict(data.X)
        assert np.mean(pred.predicted_class == data.labels) >= 0.99

    def test_aborts_on_non_finite(self):
        data = D.gen_gap_regression(50, 0)
        fe, cfg = toy_config(epochs=2)
        model = build(fe, cfg, data)
        model.gp.likelihood.log_noise.data = np.array(np.nan)
        with pytest.raises(T.TrainingAborted) as info:
            T.train(model, data)
        assert info.value.record["epoch"] == 0
        assert math.isnan(info.value.record["elbo"])

    def test_aborts_on_decomposition_failure(self):
        data = D.gen_gap_regression(50, 0)
        fe, cfg = toy_config(epochs=2)
        model = build(fe, cfg, data)
        model.gp.log_outputscale.data[:] = np.nan
        with pytest.raises(T.TrainingAborted) as info:
            T.train(model, data)
        assert "error" in info.value.record

    def test_select_on_val_restores_best(self):
        data = D.gen_synthetic_cate(200, 0)
        tr, va = data.subset("train"), data.subset("val")
        fe = FeatureExtractorConfig(8, 16, 1)
        cfg = T.TrainConfig(epochs=4, num_inducing=10, append_treatment=True, select_on_val=True, noise_init=0.5)
        model = build(fe, cfg, tr)
        log = T.train(model, tr, va)
        best = log.records[log.best_epoch].val_nll
        assert best == min(r.val_nll for r in log.records)
        assert T.validation_nll(model, va) == pytest.approx(best)

    def test_toy_rmse(self, toy):
        data, model, _, _ = toy
        pred = model.predict(data.X)
        rmse = np.sqrt(np.mean((pred.mean[:, 0] - data.Y[:, 0]) ** 2))
        assert rmse <= 2 * data.provenance["noise_std"]

    def test_toy_elbo_trend(self, toy):
        # Minibatch Adam makes the epoch-wise full ELBO jitter, so the smoothed
        # curve is checked for drops that are small next to its overall rise.
        _, _, log, _ = toy
        smooth = np.convolve(log.column("full_elbo"), np.ones(10) / 10, "valid")
        rise = smooth.max() - smooth[0]
        assert smooth[-1] > smooth[0]
        largest_drop = max(0.0, -np.diff(smooth).min())
        assert largest_drop <= 0.01 * rise

    def test_lipschitz_every_epoch(self, toy):
        _, _, _, bounds = toy
        assert all(max(b.block_sigmas) <= 0.95 * (1 + 1e-3) for b in bounds)

    def test_probe_data_fit(self, toy):
        data, model, _, _ = toy
        idx = np.random.default_rng(0).choice(len(data), 100, replace=False)
        probe = T.collapse_probe(model, data.X[idx], data.Y[idx])
        assert -0.6 * 100 <= probe["data_fit"] <= -0.4 * 100


class TestCollapseProbe:
    def test_probe_limit(self):
        data = D.gen_gap_regression(600, 0)
        fe, cfg = toy_config()
        model = build(fe, cfg, data)
        with pytest.raises(ValueError):
            T.collapse_probe(model, data.X, data.Y)

    def test_coincident_rows_minimize_complexity(self):
        rng = np.random.default_rng(0)
        base = rng.standard_normal((6, 2))
        y = rng.standard_normal(6)

        def penalty(f):
            k = G.kernel_matrix("rbf", 1.0, 1.0, f, f)
            return G.exact_gp_marginal(k, y, 1.0, 1e-6).complexity_penalty

        coincident = base.copy()
        coincident[1] = coincident[0]
        for _ in range(20):
            perturbed = coincident + 0.05 * rng.standard_normal(coincident.shape)
            assert penalty(coincident) <= penalty(perturbed)

    def test_orthonormal_features_spread(self):
        rng = np.random.default_rng(1)
        eye = 10.0 * np.eye(5)
        y = np.zeros(5)

        def logdet(f):
            k = G.kernel_matrix("rbf", 1.0, 1.0, f, f)
            return -2.0 * G.exact_gp_marginal(k, y, 1.0, 1e-3).complexity

        top = logdet(eye)
        assert top == pytest.approx(5 * math.log(1 + 1e-3), abs=1e-6)
        for _ in range(20):
            assert logdet(rng.standard_normal((5, 5))) <= top + 1e-9
