"""Self-test battery: finite-difference gradient checks, SVGP vs exact GP, Lipschitz audit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gp as G
from . import numcore as nc
from .features import FeatureExtractor, FeatureExtractorConfig
from .numcore import Tensor, check_grads

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} measured={self.value:.3e}  tol={self.tol:.1e}"


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from_kinks(x: Tensor, offsets=(0.0, 0.05, 0.1)) -> Tensor:
    for off in offsets:
        x.data[np.abs(x.data + off) < 0.2] += 0.5
    return x


def _unary(fn):
    def case(rng):
        x = _away_from_kinks(_leaf(rng, 4, 3))
        w = rng.standard_normal(fn(x).shape)
        return (lambda: (fn(x) * w).sum()), [x]
    return case


def _binary(fn, positive_b: bool = False):
    def case(rng):
        a, b = _leaf(rng, 4, 3), _leaf(rng, 1, 3)
        if positive_b:
            b.data = np.abs(b.data) + 0.5
        w = rng.standard_normal((4, 3))
        return (lambda: (fn(a, b) * w).sum()), [a, b]
    return case


def _matmul_case(rng):
    a, b, v = _leaf(rng, 4, 3), _leaf(rng, 3, 5), _leaf(rng, 3)
    w = rng.standard_normal((4, 5))
    return (lambda: (nc.matmul(a, b) * w).sum() + nc.matmul(a, v).sum() + nc.matmul(v, b).sum()), [a, b, v]


def _spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def _cholesky_case(rng):
    base = Tensor(_spd(rng, 4), requires_grad=True)
    w = rng.standard_normal((4, 4))
    # symmetrise inside the graph so perturbations stay symmetric
    return (lambda: (nc.cholesky((base + base.T) * 0.5) * w).sum()), [base]


def _triangular_case(rng):
    lower = np.tril(rng.standard_normal((4, 4))) + 3.0 * np.eye(4)
    l_t, b = Tensor(lower, requires_grad=True), _leaf(rng, 4, 2)
    w = rng.standard_normal((4, 2))
    mask = np.tril(np.ones((4, 4)))
    return (lambda: (nc.triangular_solve(l_t * mask, b, lower=True) * w).sum()
            + (nc.triangular_solve((l_t * mask).T, b, lower=False) * w).sum()), [l_t, b]


def _pairwise_case(rng):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 5, 3)
    w = rng.standard_normal((4, 5))
    return (lambda: (nc.pairwise_sqdist(a, b) * w).sum()), [a, b]


def _svgp(rng, likelihood, outputs=1, n=6, m=3, dim=2, kernel="rbf"):
    gp = G.SVGP(rng.standard_normal((m, dim)), outputs, kernel, 1.3, 0.8, likelihood)
    gp.q_mean.data = 0.3 * rng.standard_normal(gp.q_mean.shape)
    gp.q_tril.data = 0.2 * rng.standard_normal(gp.q_tril.shape)
    gp.q_log_diag.data = 0.2 * rng.standard_normal(gp.q_log_diag.shape)
    gp.mean_const.data = 0.1 * rng.standard_normal(outputs)
    f = _leaf(rng, n, dim)
    return gp, f


def _elbo_gaussian_case(kernel):
    def case(rng):
        gp, f = _svgp(rng, G.GaussianLikelihood.create(0.3), kernel=kernel)
        y = rng.standard_normal((6, 1))
        return (lambda: gp.elbo(f, y, 20).elbo), [f] + gp.parameters()
    return case


def _elbo_softmax_case(rng):
    gp, f = _svgp(rng, G.SoftmaxLikelihood(3, mc_samples=4), outputs=3)
    y = np.eye(3)[rng.integers(0, 3, 6)]
    seed = int(rng.integers(2**31))
    return (lambda: gp.elbo(f, y, 20, np.random.default_rng(seed)).elbo), [f] + gp.parameters()


def _extractor_case(rng):
    cfg = FeatureExtractorConfig(3, 5, 2, 0.95, activation="elu", use_batchnorm=True)
    fe = FeatureExtractor(cfg, rng)
    x = rng.standard_normal((6, 3))
    w = rng.standard_normal((6, 5))
    return (lambda: (fe(x, train=True) * w).sum()), fe.parameters()


# Each case exercises the named rule; most also touch mul/sum/add along the way.
GRADIENT_CASES = {
    "add": _binary(nc.add),
    "sub": _binary(nc.sub),
    "mul": _binary(nc.mul),
    "div": _binary(nc.div, positive_b=True),
    "neg": _unary(nc.neg),
    "power": _unary(lambda t: nc.power(t * t + 1.0, 1.5)),
    "square": _unary(nc.square),
    "exp": _unary(nc.exp),
    "log": _unary(lambda t: nc.log(nc.exp(t) + 1.0)),
    "sqrt": _unary(lambda t: nc.sqrt(t * t + 0.5)),
    "relu": _unary(nc.relu),
    "elu": _unary(nc.elu),
    "tanh": _unary(nc.tanh),
    "softplus": _unary(nc.softplus),
    "clamp_min": _unary(lambda t: nc.clamp_min(t, -0.1)),
    "abs": _unary(lambda t: nc.absolute(t + 0.05)),
    "sum": _unary(lambda t: nc.tsum(t, axis=0) * 2.0),
    "logsumexp": _unary(lambda t: nc.logsumexp(t, axis=1)),
    "reshape": _unary(lambda t: t.reshape(-1) * 2.0),
    "transpose": _unary(lambda t: nc.transpose(t) * 2.0),
    "take": _unary(lambda t: t[np.array([0, 2, 2])]),
    "concat": _unary(lambda t: nc.concat([t, t * 2.0], axis=1)),
    "diagonal": _unary(lambda t: nc.diagonal(t[:3] @ t[:3].T)),
    "matmul": _matmul_case,
    "pairwise_sqdist": _pairwise_case,
    "cholesky": _cholesky_case,
    "triangular_solve": _triangular_case,
    "feature_extractor": _extractor_case,
    "elbo_gaussian_rbf": _elbo_gaussian_case("rbf"),
    "elbo_gaussian_matern32": _elbo_gaussian_case("matern32"),
    "elbo_softmax": _elbo_softmax_case,
}


def gradient_check(name: str, seeds=range(3)) -> CheckResult:
    worst = 0.0
    for seed in seeds:
        fn, leaves = GRADIENT_CASES[name](np.random.default_rng(seed))
        err = check_grads(fn, leaves)
        worst = max(worst, err if np.isfinite(err) else np.inf)
    return CheckResult(f"grad:{name}", worst, GRAD_TOL, worst < GRAD_TOL)


def oracle_problem(seed: int = 0, n: int = 20, noise: float = 0.01):
    """Small 1D regression set used for the SVGP vs exact GP comparison."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-3.0, 3.0, n))[:, None]
    y = np.sin(x[:, 0]) + np.sqrt(noise) * rng.standard_normal(n)
    return x, y[:, None]


def oracle_check(seed: int = 0) -> list[CheckResult]:
    """Variational GP with Z = X and fitted variational state against exact GP regression."""
    from .training import fit_variational

    x, y = oracle_problem(seed)
    noise, lengthscale, scale = 0.01, 1.0, 1.0
    gp = G.SVGP(x, 1, "rbf", lengthscale, scale, G.GaussianLikelihood.create(noise))
    elbo = fit_variational(gp, x, y)
    gram = G.kernel_matrix("rbf", lengthscale, 1.0, x, x)
    exact = G.exact_gp_marginal(gram, y[:, 0], scale, noise).total
    x_test = np.linspace(-4.0, 4.0, 50)[:, None]
    ex_mean, ex_var = G.exact_gp_predict("rbf", lengthscale, scale, x, y[:, 0], noise, x_test)
    mean, var = (t.data[:, 0] for t in gp.predict_latent(x_test))
    return [
        CheckResult("oracle:elbo_gap", abs(exact - elbo), 1e-2, abs(exact - elbo) < 1e-2),
        CheckResult("oracle:mean", float(np.max(np.abs(mean - ex_mean))), 1e-3,
                    float(np.max(np.abs(mean - ex_mean))) < 1e-3),
        CheckResult("oracle:variance", float(np.max(np.abs(var - ex_var))), 1e-3,
                    float(np.max(np.abs(var - ex_var))) < 1e-3),
    ]


def lipschitz_check(seed: int = 0, coeff: float = 0.95) -> list[CheckResult]:
    """After normalisation every linear map's exact spectral norm stays near ``coeff``."""
    rng = np.random.default_rng(seed)
    fe = FeatureExtractor(FeatureExtractorConfig(2, 64, 4, coeff), rng)
    for lin in fe.linears():
        lin.weight.data *= 5.0
    for _ in range(50):
        fe.spectral_normalize()
    report = fe.lipschitz_audit()
    sigmas = [report.input_sigma] + list(report.block_sigmas)
    worst = max(sigmas) - coeff
    bound_gap = report.product_bound - report.input_sigma * (1.0 + coeff) ** len(report.block_sigmas)
    return [
        CheckResult("lipschitz:layer_sigma", max(worst, 0.0), 1e-2, worst < 1e-2),
        CheckResult("lipschitz:product_bound", max(bound_gap, 0.0), 1e-1, bound_gap < 1e-1),
    ]


def run_all(grad_seeds=range(3)) -> list[CheckResult]:
    results = [gradient_check(name, grad_seeds) for name in GRADIENT_CASES]
    results += oracle_check()
    results += lipschitz_check()
    return results
