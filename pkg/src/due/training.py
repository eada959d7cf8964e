"""Initialisation and minibatch training of the feature extractor + SVGP."""

from __future__ import annotations

import math
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gp as G
from . import metrics as M
from . import numcore as nc
from .datasets import Dataset, Scaler
from .features import FeatureExtractor, FeatureExtractorConfig
from .numcore import Tensor


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


# ---------------------------------------------------------------------------
# Optimisers (descent on the loss = -ELBO / n)
# ---------------------------------------------------------------------------


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(name: str, params: list[Tensor], lr: float, momentum: float = 0.0):
    if name == "sgd":
        return SGD(params, lr, momentum)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# Configuration and model bundle
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.0
    epochs: int = 100
    batch_size: int = 128
    init_subset_size: int = 1000
    num_inducing: int = 20
    seed: int = 0
    elbo_mc_samples: int = 8
    pred_mc_samples: int = 32
    kernel: str = "rbf"
    likelihood: str = "gaussian"
    num_outputs: int = 1
    noise_init: float = 0.01
    append_treatment: bool = False
    select_on_val: bool = False
    log_full_elbo: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.num_inducing < 1:
            raise ValueError("num_inducing must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.likelihood not in ("gaussian", "softmax"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")


@dataclass
class DUEModel:
    extractor: FeatureExtractor
    gp: G.SVGP
    config: TrainConfig
    scaler: Scaler | None = None

    @property
    def is_classifier(self) -> bool:
        return isinstance(self.gp.likelihood, G.SoftmaxLikelihood)

    def features(self, x, treatment=None, train: bool = False, rng=None) -> Tensor:
        f = self.extractor(x, train=train, rng=rng)
        if self.config.append_treatment:
            if treatment is None:
                raise ValueError("this model expects a treatment indicator")
            f = nc.concat([f, np.asarray(treatment, dtype=np.float64).reshape(-1, 1)], axis=1)
        return f

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.gp.parameters()

    def predict(self, x, treatment=None, rng=None) -> G.PredictiveDistribution:
        f = self.features(x, treatment).data
        if self.is_classifier:
            rng = rng if rng is not None else substream(self.config.seed, "mc")
            return G.classify(self.gp, f, self.config.pred_mc_samples, rng)
        return G.svgp_predict(self.gp, f)


def build_model(fe_config: FeatureExtractorConfig, cfg: TrainConfig) -> DUEModel:
    """Untrained extractor with a placeholder GP; call ``initialize`` next."""
    extractor = FeatureExtractor(fe_config, substream(cfg.seed, "weights"))
    feat_dim = fe_config.feature_dim + (1 if cfg.append_treatment else 0)
    if cfg.likelihood == "softmax":
        lik = G.SoftmaxLikelihood(cfg.num_outputs, cfg.elbo_mc_samples)
    else:
        lik = G.GaussianLikelihood.create(cfg.noise_init)
    gp = G.SVGP(np.zeros((cfg.num_inducing, feat_dim)), cfg.num_outputs, cfg.kernel, 1.0, 1.0, lik)
    return DUEModel(extractor, gp, cfg)


def initialize(model: DUEModel, dataset: Dataset) -> DUEModel:
    """Place inducing points by k-means and set the length scale from feature distances."""
    cfg = model.config
    n = len(dataset)
    if n < max(cfg.num_inducing, 2):
        raise ValueError(f"dataset of {n} rows is too small for m={cfg.num_inducing}")
    rng = substream(cfg.seed, "init")
    p = min(cfg.init_subset_size, n)
    idx = np.sort(rng.choice(n, size=p, replace=False)) if p < n else np.arange(n)
    if model.extractor.config.spectral_normalization:
        model.extractor.spectral_normalize(settle=True)
    t = dataset.treatment[idx] if cfg.append_treatment else None
    feats = model.features(dataset.X[idx], t).data
    z = G.init_inducing(feats, cfg.num_inducing, seed=rng.integers(2**32))
    lengthscale = G.init_lengthscale(feats)
    lik = model.gp.likelihood
    if isinstance(lik, G.GaussianLikelihood):
        lik = G.GaussianLikelihood.create(cfg.noise_init)
    model.gp = G.SVGP(z, cfg.num_outputs, cfg.kernel, lengthscale, 1.0, lik)
    model.scaler = dataset.scaler
    return model


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    expected_log_lik: float
    kl: float
    lengthscale: float
    outputscale: float
    noise: float
    wall_time: float
    full_elbo: float = float("nan")
    val_nll: float = float("nan")


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def full_elbo(model: DUEModel, dataset: Dataset, rng=None) -> float:
    t = dataset.treatment if model.config.append_treatment else None
    f = model.features(dataset.X, t).data
    rng = rng if rng is not None else substream(model.config.seed, "full_elbo")
    return model.gp.elbo(f, dataset.Y, len(dataset), rng).elbo.item()


def validation_nll(model: DUEModel, dataset: Dataset) -> float:
    t = dataset.treatment if model.config.append_treatment else None
    pred = model.predict(dataset.X, t, rng=substream(model.config.seed, "val_mc"))
    if model.is_classifier:
        return M.classification_nll(pred.probs, dataset.labels)
    return M.gaussian_nll(pred.mean[:, 0], pred.variance[:, 0] + model.gp.likelihood.noise, dataset.Y[:, 0])


def _snapshot(model: DUEModel):
    return model.extractor.state(), model.gp.state()


def _restore(model: DUEModel, snap) -> None:
    model.extractor.load_state(snap[0])
    model.gp.load_state(snap[1])


def train(model: DUEModel, dataset: Dataset, val: Dataset | None = None, callback=None) -> TrainLog:
    """Minibatch ELBO ascent over extractor, GP hyperparameters and variational state.

    Spectral normalisation (when enabled) runs before every minibatch step
    with the configured power-iteration count, and once more at each epoch
    end with the iteration run to convergence.
    A non-finite loss or a failed kernel decomposition aborts with
    ``TrainingAborted``.
    """
    cfg = model.config
    n = len(dataset)
    data_rng = substream(cfg.seed, "data")
    drop_rng = substream(cfg.seed, "dropout")
    mc_rng = substream(cfg.seed, "elbo_mc")
    params = model.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum)
    constrained = model.extractor.config.spectral_normalization
    log = TrainLog()
    best = (math.inf, None)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = data_rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            if constrained:
                model.extractor.spectral_normalize()
            opt.zero_grad()
            t = dataset.treatment[idx] if cfg.append_treatment else None
            f = model.features(dataset.X[idx], t, train=True, rng=drop_rng)
            try:
                terms = model.gp.elbo(f, dataset.Y[idx], n, mc_rng)
            except nc.CholeskyError as exc:
                raise TrainingAborted(
                    f"kernel decomposition failed at epoch {epoch}, batch starting {lo}",
                    {"epoch": epoch, "batch_start": lo, "error": str(exc)},
                ) from exc
            loss = terms.elbo * (-1.0 / n)
            if not np.isfinite(loss.item()):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}, batch starting {lo}",
                    {"epoch": epoch, "batch_start": lo, "elbo": terms.elbo.item(),
                     "kl": terms.kl.item(), "ell": terms.expected_log_lik.item()},
                )
            loss.backward()
            opt.step()
            sums += (terms.elbo.item(), terms.expected_log_lik.item(), terms.kl.item())
            batches += 1
        if constrained:
            model.extractor.spectral_normalize(settle=True)
        lik = model.gp.likelihood
        rec = EpochRecord(
            epoch,
            *(sums / batches),
            float(np.exp(model.gp.log_lengthscale.data[0])),
            float(np.exp(model.gp.log_outputscale.data[0])),
            lik.noise if isinstance(lik, G.GaussianLikelihood) else float("nan"),
            time.perf_counter() - start,
        )
        if cfg.log_full_elbo:
            rec.full_elbo = full_elbo(model, dataset)
        if val is not None:
            rec.val_nll = validation_nll(model, val)
            if cfg.select_on_val and rec.val_nll < best[0]:
                best = (rec.val_nll, _snapshot(model))
                log.best_epoch = epoch
        log.records.append(rec)
        if callback is not None:
            callback(model, rec)
    if cfg.select_on_val and best[1] is not None:
        _restore(model, best[1])
    return log


def fit_variational(gp: G.SVGP, features, y, n_total: int | None = None, params=None, max_iter: int = 5000) -> float:
    """Maximise the Gaussian-likelihood ELBO over ``params`` (default: variational state) with L-BFGS.

    Returns the final ELBO.
    """
    from scipy.optimize import minimize

    params = gp.variational_parameters() if params is None else params
    n_total = len(features) if n_total is None else n_total
    sizes = [p.data.size for p in params]

    def unpack(vec):
        pos = 0
        for p, size in zip(params, sizes):
            p.data = vec[pos : pos + size].reshape(p.shape).copy()
            pos += size

    def objective(vec):
        unpack(vec)
        for p in params:
            p.grad = None
        value = gp.elbo(features, y, n_total).elbo
        (-value).backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        return -value.item(), np.concatenate([g.ravel() for g in grads])

    start = np.concatenate([p.data.ravel() for p in params])
    res = minimize(objective, start, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-15})
    unpack(res.x)
    return -float(res.fun)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def pairwise_distance_stats(features: np.ndarray) -> dict[str, float]:
    d = np.sqrt(nc.pairwise_sqdist(features, features).data)
    iu = np.triu_indices(len(features), k=1)
    vals = d[iu]
    return {"min": float(vals.min()), "mean": float(vals.mean()), "max": float(vals.max())}


def collapse_probe(model: DUEModel, probe_x, probe_y, treatment=None) -> dict[str, float]:
    """Exact-GP marginal likelihood split and feature geometry on a small probe set."""
    probe_x = np.asarray(probe_x, dtype=np.float64)
    if len(probe_x) > 500:
        raise ValueError("probe set must have at most 500 rows")
    f = model.features(probe_x, treatment).data
    gp = model.gp
    lik = gp.likelihood
    noise = lik.noise if isinstance(lik, G.GaussianLikelihood) else 1e-2
    lengthscale = float(np.exp(gp.log_lengthscale.data[0]))
    scale = float(np.exp(gp.log_outputscale.data[0]))
    gram = G.kernel_matrix(gp.kernel, lengthscale, 1.0, f, f)
    y = np.asarray(probe_y, dtype=np.float64)
    y = y[:, 0] if y.ndim == 2 else y
    ml = G.exact_gp_marginal(gram, y, scale, noise, float(gp.mean_const.data[0]))
    out = {"total": ml.total, "data_fit": ml.data_fit, "complexity": ml.complexity,
           "complexity_penalty": ml.complexity_penalty, "n_probe": len(f)}
    out.update({f"dist_{k}": v for k, v in pairwise_distance_stats(f).items()})
    return out
