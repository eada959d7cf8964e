"""Comparison models: random Fourier feature regression, deep ensembles, softmax nets."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import numcore as nc
from .features import FeatureExtractor, FeatureExtractorConfig, Linear
from .gp import predictive_entropy
from .training import TrainConfig, make_optimizer, substream

# ---------------------------------------------------------------------------
# Random Fourier features with an exact Bayesian linear posterior
# ---------------------------------------------------------------------------


@dataclass
class RFFModel:
    omega: np.ndarray  # [D, J]
    phase: np.ndarray  # [D]
    outputscale: float = 1.0
    ridge: float = 1.0
    noise: float = 0.01
    weight_mean: np.ndarray | None = None
    weight_cov: np.ndarray | None = None

    @classmethod
    def create(cls, input_dim: int, num_features: int = 1024, lengthscale: float = 1.0,
               outputscale: float = 1.0, ridge: float = 1.0, noise: float = 0.01, seed: int = 0) -> RFFModel:
        if num_features < 1:
            raise ValueError("need at least one random feature")
        if ridge <= 0 or noise <= 0 or lengthscale <= 0:
            raise ValueError("ridge, noise and lengthscale must be positive")
        rng = np.random.default_rng(seed)
        omega = rng.standard_normal((num_features, input_dim)) / lengthscale
        phase = rng.uniform(0.0, 2 * np.pi, num_features)
        return cls(omega, phase, outputscale, ridge, noise)

    @property
    def num_features(self) -> int:
        return len(self.phase)


def rff_features(model: RFFModel, x) -> np.ndarray:
    """cos features scaled so their inner product approximates the RBF kernel."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    scale = np.sqrt(2.0 * model.outputscale / model.num_features)
    return scale * np.cos(x @ model.omega.T + model.phase)


def rff_fit(model: RFFModel, phi, y) -> RFFModel:
    """Posterior over the linear weights: precision ``ridge*I + phi^T phi / noise``."""
    phi = np.asarray(phi, dtype=np.float64).reshape(-1, model.num_features)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    precision = model.ridge * np.eye(model.num_features) + phi.T @ phi / model.noise
    factor = cho_factor(precision, lower=True)
    model.weight_cov = cho_solve(factor, np.eye(model.num_features))
    model.weight_cov = 0.5 * (model.weight_cov + model.weight_cov.T)
    model.weight_mean = cho_solve(factor, phi.T @ y / model.noise)
    return model


def rff_predict(model: RFFModel, phi) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance (noise included) at feature rows ``phi``."""
    if model.weight_mean is None:
        model = rff_fit(model, np.zeros((0, model.num_features)), np.zeros(0))
    phi = np.atleast_2d(phi)
    var = np.einsum("nd,de,ne->n", phi, model.weight_cov, phi) + model.noise
    return phi @ model.weight_mean, var


# ---------------------------------------------------------------------------
# Shared network plumbing
# ---------------------------------------------------------------------------


def _unconstrained(config: FeatureExtractorConfig) -> FeatureExtractorConfig:
    return replace(config, spectral_normalization=False)


def _minibatch_fit(params, loss_fn, n: int, cfg: TrainConfig, data_rng) -> list[float]:
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum)
    history = []
    for _ in range(cfg.epochs):
        order = data_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            loss = loss_fn(idx)
            if not np.isfinite(loss.item()):
                raise FloatingPointError("non-finite loss while training baseline")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
    return history


# ---------------------------------------------------------------------------
# Softmax network
# ---------------------------------------------------------------------------


@dataclass
class SoftmaxNet:
    extractor: FeatureExtractor
    head: Linear

    def logits(self, x) -> nc.Tensor:
        return self.head(self.extractor(x))

    def parameters(self) -> list[nc.Tensor]:
        return self.extractor.parameters() + [self.head.weight, self.head.bias]


@dataclass
class SoftmaxPrediction:
    probs: np.ndarray
    entropy: np.ndarray


def softmax_net_train(fe_config: FeatureExtractorConfig, cfg: TrainConfig, x, labels, num_classes: int) -> SoftmaxNet:
    """Residual network without spectral normalisation, trained by cross-entropy."""
    rng = substream(cfg.seed, "softmax_weights")
    net = SoftmaxNet(FeatureExtractor(_unconstrained(fe_config), rng),
                     Linear.create(fe_config.feature_dim, num_classes, rng))
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels).astype(int)

    def loss_fn(idx):
        logp = nc.log_softmax(net.logits(x[idx]), axis=1)
        return -nc.mean(nc.take(logp, (np.arange(len(idx)), labels[idx])))

    net.history = _minibatch_fit(net.parameters(), loss_fn, len(x), cfg, substream(cfg.seed, "softmax_data"))
    return net


def softmax_net_predict(net: SoftmaxNet, x) -> SoftmaxPrediction:
    logits = net.logits(x).data
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return SoftmaxPrediction(probs, predictive_entropy(probs))


# ---------------------------------------------------------------------------
# Deep ensemble of Gaussian regressors
# ---------------------------------------------------------------------------


@dataclass
class GaussianNet:
    extractor: FeatureExtractor
    head: Linear  # two outputs: mean and raw variance

    def moments(self, x) -> tuple[nc.Tensor, nc.Tensor]:
        out = self.head(self.extractor(x))
        mean = nc.reshape(out @ np.array([1.0, 0.0]), (-1,))
        var = nc.softplus(out @ np.array([0.0, 1.0])) + 1e-6
        return mean, var

    def parameters(self) -> list[nc.Tensor]:
        return self.extractor.parameters() + [self.head.weight, self.head.bias]


@dataclass
class EnsembleModel:
    members: list[GaussianNet]

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")


def mixture_moments(means, variances) -> tuple[np.ndarray, np.ndarray]:
    """Moments of an equal-weight Gaussian mixture; inputs are [K, n]."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    mean = means.mean(axis=0)
    var = (variances + means**2).mean(axis=0) - mean**2
    return mean, np.maximum(var, 0.0)


def ensemble_train(fe_config: FeatureExtractorConfig, cfg: TrainConfig, x, y, members: int = 10) -> EnsembleModel:
    """Independently initialised members, each with its own data order."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    nets = []
    for k in range(members):
        rng = substream(cfg.seed, f"ensemble{k}_weights")
        net = GaussianNet(FeatureExtractor(_unconstrained(fe_config), rng), Linear.create(fe_config.feature_dim, 2, rng))

        def loss_fn(idx, net=net):
            mean, var = net.moments(x[idx])
            resid = y[idx] - mean
            return nc.mean(0.5 * nc.log(var) + 0.5 * resid * resid / var)

        _minibatch_fit(net.parameters(), loss_fn, len(x), cfg, substream(cfg.seed, f"ensemble{k}_data"))
        nets.append(net)
    return EnsembleModel(nets)


def ensemble_predict(model: EnsembleModel, x) -> tuple[np.ndarray, np.ndarray]:
    moments = [net.moments(x) for net in model.members]
    return mixture_moments([m.data for m, _ in moments], [v.data for _, v in moments])
