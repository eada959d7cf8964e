"""Whitened inducing-point variational GP on top of learned features.

Every output dimension ``t`` has its own length scale, output scale,
constant mean and whitened variational factor ``q(v_t) = N(m_t, L_t L_t')``
with ``u_t = chol(K_zz) v_t``. Inducing inputs ``Z`` live in feature space
and are shared across outputs.

The exact-GP functions at the bottom work on plain arrays through scipy so
they stay independent of the autodiff path they are used to verify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.optimize import brentq, minimize_scalar

from . import numcore as nc
from .numcore import Tensor

VAR_FLOOR = 1e-12
KERNELS = ("rbf", "matern32")


# ---------------------------------------------------------------------------
# Kernels and initialisation
# ---------------------------------------------------------------------------


def kernel_eval(kind: str, lengthscale, outputscale, a, b) -> Tensor:
    """Stationary base kernel between feature rows ``a`` [n, J] and ``b`` [m, J]."""
    d2 = nc.pairwise_sqdist(a, b) / nc.square(lengthscale)
    if kind == "rbf":
        return outputscale * nc.exp(d2 * -0.5)
    if kind == "matern32":
        r = nc.sqrt(d2 * 3.0)
        return outputscale * (1.0 + r) * nc.exp(-r)
    raise ValueError(f"unknown kernel {kind!r}")


def init_lengthscale(features) -> float:
    """Mean Euclidean distance over all unordered pairs of feature rows.

    Degenerate inputs (all rows identical) fall back to 1.0.
    """
    f = np.asarray(features, dtype=np.float64)
    if len(f) < 2:
        raise ValueError("need at least two points for a pairwise distance")
    d = np.sqrt(nc.pairwise_sqdist(f, f).data)
    iu = np.triu_indices(len(f), k=1)
    value = float(d[iu].mean())
    return value if value > 0 else 1.0


def init_inducing(features, m: int, seed=0) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if len(f) < m:
        raise ValueError(f"need at least m={m} feature rows, got {len(f)}")
    return nc.kmeans(f, m, seed)


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------


@dataclass
class GaussianLikelihood:
    log_noise: Tensor

    @classmethod
    def create(cls, noise: float = 0.01) -> GaussianLikelihood:
        if noise <= 0:
            raise ValueError("noise variance must be positive")
        return cls(Tensor(math.log(noise), requires_grad=True))

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise.data))

    def parameters(self) -> list[Tensor]:
        return [self.log_noise]


@dataclass
class SoftmaxLikelihood:
    num_classes: int
    mc_samples: int = 8

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    def parameters(self) -> list[Tensor]:
        return []


@dataclass
class ElboTerms:
    elbo: Tensor
    expected_log_lik: Tensor
    kl: Tensor


@dataclass
class PredictiveDistribution:
    mean: np.ndarray  # [n, T] latent
    variance: np.ndarray  # [n, T] latent, diagonal only
    probs: np.ndarray | None = None
    entropy: np.ndarray | None = None

    @property
    def predicted_class(self) -> np.ndarray | None:
        return None if self.probs is None else np.argmax(self.probs, axis=1)


# ---------------------------------------------------------------------------
# Variational GP
# ---------------------------------------------------------------------------


class SVGP:
    def __init__(
        self,
        inducing,
        num_outputs: int = 1,
        kernel: str = "rbf",
        lengthscale: float = 1.0,
        outputscale: float = 1.0,
        likelihood: GaussianLikelihood | SoftmaxLikelihood | None = None,
    ):
        if kernel not in KERNELS:
            raise ValueError(f"unknown kernel {kernel!r}")
        if lengthscale <= 0 or outputscale <= 0:
            raise ValueError("length scale and output scale must be positive")
        z = np.array(inducing, dtype=np.float64)
        m, t = len(z), num_outputs
        self.kernel = kernel
        self.num_outputs = t
        self.Z = Tensor(z, requires_grad=True)
        self.log_lengthscale = Tensor(np.full(t, math.log(lengthscale)), requires_grad=True)
        self.log_outputscale = Tensor(np.full(t, math.log(outputscale)), requires_grad=True)
        self.mean_const = Tensor(np.zeros(t), requires_grad=True)
        self.q_mean = Tensor(np.zeros((t, m)), requires_grad=True)
        self.q_tril = Tensor(np.zeros((t, m, m)), requires_grad=True)
        self.q_log_diag = Tensor(np.zeros((t, m)), requires_grad=True)
        self.likelihood = likelihood if likelihood is not None else GaussianLikelihood.create()
        self._strict = np.tril(np.ones((m, m)), k=-1)
        self._eye = np.eye(m)

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    def variational_parameters(self) -> list[Tensor]:
        return [self.q_mean, self.q_tril, self.q_log_diag]

    def hyperparameters(self) -> list[Tensor]:
        return [self.log_lengthscale, self.log_outputscale, self.mean_const] + self.likelihood.parameters()

    def parameters(self) -> list[Tensor]:
        return [self.Z] + self.hyperparameters() + self.variational_parameters()

    def lengthscale(self, t: int) -> Tensor:
        return nc.exp(self.log_lengthscale[t])

    def outputscale(self, t: int) -> Tensor:
        return nc.exp(self.log_outputscale[t])

    def q_sqrt(self, t: int) -> Tensor:
        """Lower-triangular whitened covariance factor with positive diagonal."""
        diag = nc.exp(self.q_log_diag[t]).reshape(1, -1)
        return self.q_tril[t] * self._strict + diag * self._eye

    def kernel_between(self, t: int, a, b) -> Tensor:
        return kernel_eval(self.kernel, self.lengthscale(t), self.outputscale(t), a, b)

    def _projection(self, t: int, f) -> Tensor:
        chol = nc.cholesky(self.kernel_between(t, self.Z, self.Z))
        return nc.triangular_solve(chol, self.kernel_between(t, self.Z, f), lower=True)

    def predict_latent(self, f) -> tuple[Tensor, Tensor]:
        """Latent marginal mean and variance, each [n, T]."""
        f = nc.as_tensor(f)
        means, variances = [], []
        for t in range(self.num_outputs):
            a = self._projection(t, f)  # [m, n]
            mean = self.mean_const[t] + self.q_mean[t] @ a
            sa = self.q_sqrt(t).T @ a
            var = self.outputscale(t) - nc.square(a).sum(axis=0) + nc.square(sa).sum(axis=0)
            means.append(mean.reshape(-1, 1))
            variances.append(nc.clamp_min(var, VAR_FLOOR).reshape(-1, 1))
        if self.num_outputs == 1:
            return means[0], variances[0]
        return nc.concat(means, axis=1), nc.concat(variances, axis=1)

    def predict_pair(self, fa, fb) -> dict[str, np.ndarray]:
        """Row-wise joint latent moments at two inputs per row (first output).

        Returns means, marginal variances and the cross covariance between
        ``fa[i]`` and ``fb[i]``.
        """
        fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
        a = self._projection(0, fa).data
        b = self._projection(0, fb).data
        s = self.q_sqrt(0).data
        sa, sb = s.T @ a, s.T @ b
        q = self.q_mean.data[0]
        mu = self.mean_const.data[0]
        scale = float(np.exp(self.log_outputscale.data[0]))
        prior_cross = _rowwise_kernel(self.kernel, float(np.exp(self.log_lengthscale.data[0])), scale, fa, fb)
        return {
            "mean_a": mu + q @ a,
            "mean_b": mu + q @ b,
            "var_a": np.maximum(scale - np.sum(a * a, 0) + np.sum(sa * sa, 0), VAR_FLOOR),
            "var_b": np.maximum(scale - np.sum(b * b, 0) + np.sum(sb * sb, 0), VAR_FLOOR),
            "cov_ab": prior_cross - np.sum(a * b, 0) + np.sum(sa * sb, 0),
        }

    def kl(self) -> Tensor:
        return kl_whitened(self)

    def elbo(self, f, y, n_total: int, rng: np.random.Generator | None = None) -> ElboTerms:
        return elbo(self, f, y, n_total, rng)

    # -- persistence -----------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {
            "Z": self.Z.data,
            "log_lengthscale": self.log_lengthscale.data,
            "log_outputscale": self.log_outputscale.data,
            "mean_const": self.mean_const.data,
            "q_mean": self.q_mean.data,
            "q_tril": self.q_tril.data,
            "q_log_diag": self.q_log_diag.data,
        }
        if isinstance(self.likelihood, GaussianLikelihood):
            out["log_noise"] = np.atleast_1d(self.likelihood.log_noise.data)
        return {k: np.array(v, copy=True) for k, v in out.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name in ("Z", "log_lengthscale", "log_outputscale", "mean_const", "q_mean", "q_tril", "q_log_diag"):
            getattr(self, name).data = np.array(state[name], dtype=np.float64)
        if isinstance(self.likelihood, GaussianLikelihood):
            self.likelihood.log_noise.data = np.array(state["log_noise"][0], dtype=np.float64)


def _rowwise_kernel(kind: str, lengthscale: float, outputscale: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum((a - b) ** 2, axis=1) / lengthscale**2
    if kind == "rbf":
        return outputscale * np.exp(-0.5 * d2)
    r = np.sqrt(3.0 * d2)
    return outputscale * (1.0 + r) * np.exp(-r)


def svgp_predict(gp: SVGP, f_test) -> PredictiveDistribution:
    mean, var = gp.predict_latent(f_test)
    return PredictiveDistribution(mean.data.copy(), var.data.copy())


def kl_whitened(gp: SVGP) -> Tensor:
    """KL(q(v) || N(0, I)) summed over outputs."""
    m = gp.num_inducing
    total = None
    for t in range(gp.num_outputs):
        s = gp.q_sqrt(t)
        term = (nc.square(s).sum() + nc.square(gp.q_mean[t]).sum() - m - 2.0 * gp.q_log_diag[t].sum()) * 0.5
        total = term if total is None else total + term
    return total


def _labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        return np.argmax(y, axis=1)
    return y.astype(int)


def elbo(gp: SVGP, f_batch, y_batch, n_total: int, rng: np.random.Generator | None = None) -> ElboTerms:
    """Minibatch ELBO: likelihood term scaled by ``n_total / batch`` minus the full KL."""
    f_batch = nc.as_tensor(f_batch)
    n = f_batch.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    mean, var = gp.predict_latent(f_batch)
    lik = gp.likelihood
    if isinstance(lik, GaussianLikelihood):
        y = np.asarray(y_batch, dtype=np.float64).reshape(n, -1)
        noise = nc.exp(lik.log_noise)
        per_point = (nc.square(mean - y) + var) / (noise * 2.0) + lik.log_noise * 0.5 + 0.5 * math.log(2 * math.pi)
        ell = -per_point.sum()
    else:
        labels = _labels(y_batch)
        eps = rng.standard_normal((lik.mc_samples, n, gp.num_outputs))
        samples = mean + nc.sqrt(var) * eps
        logp = nc.log_softmax(samples, axis=-1)
        picked = logp[:, np.arange(n), labels]
        ell = picked.sum() * (1.0 / lik.mc_samples)
    ell = ell * (n_total / n)
    kl = kl_whitened(gp)
    return ElboTerms(ell - kl, ell, kl)


# ---------------------------------------------------------------------------
# Classification outputs
# ---------------------------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predictive_class_probs(
    mean: np.ndarray, variance: np.ndarray, mc_samples: int = 32, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """MC average of softmax over independent per-point latent Gaussians."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if not np.any(variance):
        probs = _softmax(mean)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        eps = rng.standard_normal((mc_samples,) + mean.shape)
        probs = _softmax(mean + np.sqrt(variance) * eps).mean(axis=0)
    return probs, np.argmax(probs, axis=1)


def predictive_entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    logs = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logs, axis=-1)


def classify(gp: SVGP, features, mc_samples: int = 32, rng: np.random.Generator | None = None) -> PredictiveDistribution:
    pred = svgp_predict(gp, features)
    pred.probs, _ = predictive_class_probs(pred.mean, pred.variance, mc_samples, rng)
    pred.entropy = predictive_entropy(pred.probs)
    return pred


# ---------------------------------------------------------------------------
# Exact GP oracles
# ---------------------------------------------------------------------------


def kernel_matrix(kind: str, lengthscale: float, outputscale: float, a, b) -> np.ndarray:
    """Plain-array base kernel (no autodiff)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    d2 = np.maximum(
        np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T, 0.0
    ) / lengthscale**2
    if kind == "rbf":
        return outputscale * np.exp(-0.5 * d2)
    if kind == "matern32":
        r = np.sqrt(3.0 * d2)
        return outputscale * (1.0 + r) * np.exp(-r)
    raise ValueError(f"unknown kernel {kind!r}")


@dataclass
class MarginalLikelihood:
    """Exact GP log marginal likelihood and its two terms.

    ``data_fit = -y'C^-1 y / 2`` and ``complexity = -log|C| / 2`` are the
    signed contributions to ``total``; ``complexity_penalty`` is the
    log-determinant term itself, ``log|C| / 2``.
    """

    total: float
    data_fit: float
    complexity: float

    @property
    def complexity_penalty(self) -> float:
        return -self.complexity


def exact_gp_marginal(gram, y, signal_scale: float = 1.0, noise_var: float = 0.0, mean: float = 0.0) -> MarginalLikelihood:
    """log N(y | mean, signal_scale * K + noise_var * I) for a precomputed Gram ``K``."""
    k = np.asarray(gram, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64).reshape(-1) - mean
    n = len(r)
    cov = signal_scale * k + noise_var * np.eye(n)
    factor = sla.cholesky(cov, lower=True)
    alpha = sla.cho_solve((factor, True), r)
    data_fit = -0.5 * float(r @ alpha)
    complexity = -float(np.sum(np.log(np.diag(factor))))
    return MarginalLikelihood(data_fit + complexity - 0.5 * n * math.log(2 * math.pi), data_fit, complexity)


def exact_gp_marginal_features(
    kind: str, lengthscale: float, features, y, signal_scale: float, noise_var: float, mean: float = 0.0
) -> MarginalLikelihood:
    k = kernel_matrix(kind, lengthscale, 1.0, features, features)
    return exact_gp_marginal(k, y, signal_scale, noise_var, mean)


def optimize_signal_scale(gram, y, noise_ratio: float, bounds=(-20.0, 20.0)) -> tuple[float, MarginalLikelihood]:
    """Maximise the marginal likelihood over the signal scale by 1D search.

    The noise is tied to the signal scale (``noise_var = noise_ratio *
    signal_scale``). Under this parameterisation the derivative of the log
    marginal likelihood in ``log signal_scale`` is ``-data_fit - n/2``, so
    the search brackets that root with Brent's method rather than comparing
    objective values, which are too flat near the optimum to resolve it
    finely.
    """
    n = len(np.asarray(y).reshape(-1))

    def slope(log_scale: float) -> float:
        s = math.exp(log_scale)
        return -exact_gp_marginal(gram, y, s, noise_ratio * s).data_fit - n / 2

    log_scale = brentq(slope, *bounds, xtol=1e-14, rtol=1e-15, maxiter=500)
    s = math.exp(log_scale)
    return s, exact_gp_marginal(gram, y, s, noise_ratio * s)


def exact_gp_predict(
    kind: str,
    lengthscale: float,
    outputscale: float,
    train_features,
    y,
    noise_var: float,
    test_features,
    mean: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form GP regression posterior mean and marginal variance."""
    x = np.asarray(train_features, dtype=np.float64)
    xs = np.asarray(test_features, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64).reshape(-1) - mean
    k = kernel_matrix(kind, lengthscale, outputscale, x, x) + noise_var * np.eye(len(x))
    ks = kernel_matrix(kind, lengthscale, outputscale, x, xs)
    factor = sla.cholesky(k, lower=True)
    pred_mean = mean + ks.T @ sla.cho_solve((factor, True), r)
    v = sla.solve_triangular(factor, ks, lower=True)
    pred_var = np.maximum(outputscale - np.sum(v * v, axis=0), 0.0)
    return pred_mean, pred_var


@dataclass
class CollapseStep:
    fraction: float
    noise_var: float
    marginal: MarginalLikelihood


def optimize_noise(gram, y, signal_scale: float, bounds=(1e-10, 10.0)) -> tuple[float, MarginalLikelihood]:
    """Maximise the marginal likelihood over the noise variance (log-space 1D search)."""

    def negative(log_noise: float) -> float:
        return -exact_gp_marginal(gram, y, signal_scale, math.exp(log_noise)).total

    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    res = minimize_scalar(negative, bounds=(lo, hi), method="bounded", options={"xatol": 1e-10, "maxiter": 500})
    noise = math.exp(res.x)
    return noise, exact_gp_marginal(gram, y, signal_scale, noise)


def collapse_path(kind: str, lengthscale: float, features, y, pair=(0, 1), steps: int = 20,
                  signal_scale: float = 1.0, final_gap: float = 1e-3) -> list[CollapseStep]:
    """Move feature row ``pair[1]`` toward row ``pair[0]`` and re-fit the noise at every step.

    Step ``k`` places the moving row at fraction ``k / steps`` of the way from
    its start to a point ``final_gap`` (relative to the starting separation)
    short of coincidence. The noise variance is learned at each step by
    maximising the marginal likelihood, while the signal scale stays fixed.
    """
    f = np.array(features, dtype=np.float64)
    a, b = pair
    start, target = f[b].copy(), f[a] + final_gap * (f[b] - f[a])
    out = []
    for k in range(steps + 1):
        frac = k / steps
        f[b] = (1.0 - frac) * start + frac * target
        gram = kernel_matrix(kind, lengthscale, 1.0, f, f)
        noise, ml = optimize_noise(gram, y, signal_scale)
        out.append(CollapseStep(frac, noise, ml))
    return out
