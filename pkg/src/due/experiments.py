"""Desk-scale experiment protocols shared by the CLI demos, scripts and acceptance tests.

Every function is deterministic in its ``seed`` and returns plain dicts of
metrics plus labelled numpy series ready to be written as CSV.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import baselines as B
from . import datasets as D
from . import gp as G
from . import metrics as M
from .features import FeatureExtractorConfig
from .training import DUEModel, TrainConfig, build_model, initialize, train

# ---------------------------------------------------------------------------
# Two moons
# ---------------------------------------------------------------------------


@dataclass
class MoonsProtocol:
    n: int = 200
    noise_std: float = 0.1
    epochs: int = 600
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    num_inducing: int = 4
    ring_factor: float = 5.0
    ring_points: int = 200
    grid_res: int = 41


def moons_due_config(p: MoonsProtocol, seed: int, num_inducing: int | None = None):
    fe = FeatureExtractorConfig(2, 128, 4, 0.95)
    cfg = TrainConfig(
        optimizer="sgd", lr=p.lr, momentum=p.momentum, epochs=p.epochs, batch_size=p.batch_size,
        num_inducing=p.num_inducing if num_inducing is None else num_inducing,
        likelihood="softmax", num_outputs=2, seed=seed,
    )
    return fe, cfg


def moons_gpdnn_config(p: MoonsProtocol, seed: int):
    """Plain feed-forward extractor with 25 tanh features and no weight constraint."""
    fe, cfg = moons_due_config(p, seed)
    return replace(fe, feature_dim=25, residual=False, spectral_normalization=False, activation="tanh"), cfg


def far_ring(x: np.ndarray, factor: float, points: int) -> np.ndarray:
    radius = factor * np.max(np.linalg.norm(x, axis=1))
    angle = np.linspace(0.0, 2 * np.pi, points, endpoint=False)
    return radius * np.column_stack([np.cos(angle), np.sin(angle)])


def box_grid(low: float, high: float, res: int) -> np.ndarray:
    axis = np.linspace(low, high, res)
    return np.array([[a, b] for a in axis for b in axis])


def fit_due(fe: FeatureExtractorConfig, cfg: TrainConfig, data: D.Dataset, val: D.Dataset | None = None) -> DUEModel:
    model = initialize(build_model(fe, cfg), data)
    train(model, data, val)
    return model


def run_two_moons(seed: int = 0, protocol: MoonsProtocol | None = None,
                  variants=("due", "gpdnn", "softmax")) -> dict:
    """Train the requested models and report train accuracy and far-ring entropy.

    The returned ``series`` maps a name to grid-shaped entropy fields.
    """
    p = protocol or MoonsProtocol()
    data = D.gen_two_moons(p.n, p.noise_std, seed)
    ring = far_ring(data.X, p.ring_factor, p.ring_points)
    extent = p.ring_factor * np.max(np.abs(data.X))
    grid = box_grid(-extent, extent, p.grid_res)
    metrics, series = {}, {"grid_x0": grid[:, 0], "grid_x1": grid[:, 1]}
    for name in variants:
        start = time.perf_counter()
        if name == "softmax":
            fe, cfg = moons_due_config(p, seed)
            net = B.softmax_net_train(fe, cfg, data.X, data.labels, 2)
            train_pred = B.softmax_net_predict(net, data.X)
            ring_ent = B.softmax_net_predict(net, ring).entropy
            series[f"{name}_entropy"] = B.softmax_net_predict(net, grid).entropy
        else:
            fe, cfg = moons_due_config(p, seed) if name == "due" else moons_gpdnn_config(p, seed)
            model = fit_due(fe, cfg, data)
            train_pred = model.predict(data.X)
            ring_ent = model.predict(ring).entropy
            series[f"{name}_entropy"] = model.predict(grid).entropy
        metrics[name] = {
            "train_accuracy": M.accuracy(train_pred.probs, data.labels),
            "train_entropy": float(np.mean(train_pred.entropy)),
            "ring_entropy": float(np.mean(ring_ent)),
            "seconds": time.perf_counter() - start,
        }
    return {"metrics": metrics, "series": series, "provenance": data.provenance}


def run_inducing_ablation(seed: int = 0, counts=(4, 10, 50), protocol: MoonsProtocol | None = None) -> dict:
    """Held-out NLL of DUE on two moons for several inducing-point counts."""
    p = protocol or MoonsProtocol()
    data = D.gen_two_moons(p.n, p.noise_std, seed)
    raw = D.gen_two_moons(p.n, p.noise_std, seed + 10_000)
    test_x = data.scaler.transform(raw.scaler.inverse(raw.X))
    out = {}
    for m in counts:
        fe, cfg = moons_due_config(p, seed, num_inducing=m)
        model = fit_due(fe, cfg, data)
        pred = model.predict(test_x)
        out[m] = {"test_nll": M.classification_nll(pred.probs, raw.labels),
                  "test_accuracy": M.accuracy(pred.probs, raw.labels)}
    return out


# ---------------------------------------------------------------------------
# Feature collapse on the blob grid
# ---------------------------------------------------------------------------


def run_collapse(seed: int = 0, epochs: int = 300, feature_dim: int = 128) -> dict:
    """Collapse diagnostics for a constrained residual model and an unconstrained feed-forward one."""
    data = D.gen_blobs_grid(seed)
    grid = data.extras["grid"]
    ood = grid[data.extras["grid_log_density"] < D.blob_log_density(data.X).min()]
    star = data.extras["star"][None, :]
    base = FeatureExtractorConfig(2, feature_dim, 4, 0.95)
    cfg = TrainConfig(optimizer="sgd", lr=0.01, momentum=0.9, epochs=epochs, batch_size=32, num_inducing=4,
                      likelihood="softmax", num_outputs=2, seed=seed)
    models = {
        "constrained": base,
        "unconstrained": replace(base, residual=False, spectral_normalization=False),
    }
    report, series = {}, {"grid_x0": grid[:, 0], "grid_x1": grid[:, 1],
                          "grid_log_density": data.extras["grid_log_density"]}
    for name, fe in models.items():
        model = fit_due(fe, cfg, data)
        f_in = model.features(data.X).data
        rep = M.collapse_metrics(f_in, model.features(ood).data, data.X, ood,
                                 star=(star, model.features(star).data), noise=1e-2)
        rep["train_accuracy"] = M.accuracy(model.predict(data.X).probs, data.labels)
        report[name] = rep
        # plot coordinates: grid features on the two leading principal axes of the training features
        centre = f_in.mean(axis=0)
        axes = np.linalg.svd(f_in - centre, full_matrices=False)[2][:2]
        f_grid = (model.features(grid).data - centre) @ axes.T
        series[f"{name}_pc0"] = f_grid[:, 0]
        series[f"{name}_pc1"] = f_grid[:, 1]
    return {"metrics": report, "series": series, "provenance": data.provenance}


# ---------------------------------------------------------------------------
# 1D regression: DUE against random Fourier features on small and large data
# ---------------------------------------------------------------------------


@dataclass
class GapProtocol:
    sizes: tuple = (1_000, 100_000)
    steps: int = 12_000
    batch_size: int = 128
    lr: float = 0.01
    num_inducing: int = 20
    rff_features: int = 1024
    ridge: float = 1.0
    grid_points: int = 241


def gap_configs(p: GapProtocol, n: int, seed: int):
    fe = FeatureExtractorConfig(1, 128, 4, 0.95)
    batches = -(-n // p.batch_size)
    cfg = TrainConfig(optimizer="adam", lr=p.lr, epochs=max(1, round(p.steps / batches)), batch_size=p.batch_size,
                      num_inducing=p.num_inducing, likelihood="gaussian", noise_init=0.01, seed=seed)
    return fe, cfg


def _gap_masks(x: np.ndarray):
    x = x.ravel()
    return (x > -3) & (x < 3), (np.abs(x) >= 3) & (np.abs(x) <= 6)


def run_rff_compare(seed: int = 0, protocol: GapProtocol | None = None) -> dict:
    """Latent predictive std of DUE and an RFF head on DUE's features at each data size."""
    p = protocol or GapProtocol()
    grid = np.linspace(-8.0, 8.0, p.grid_points)[:, None]
    gap, support = _gap_masks(grid)
    metrics, series = {}, {"x": grid[:, 0]}
    for n in p.sizes:
        data = D.gen_gap_regression(n, seed)
        fe, cfg = gap_configs(p, n, seed)
        model = fit_due(fe, cfg, data)
        pred = model.predict(grid)
        due_mean, due_std = pred.mean[:, 0], np.sqrt(pred.variance[:, 0])
        gp = model.gp
        rff = B.RFFModel.create(
            fe.feature_dim, p.rff_features, float(np.exp(gp.log_lengthscale.data[0])),
            float(np.exp(gp.log_outputscale.data[0])), p.ridge, gp.likelihood.noise, seed,
        )
        f_train = model.features(data.X).data
        B.rff_fit(rff, B.rff_features(rff, f_train), data.Y[:, 0] - gp.mean_const.data[0])
        rff_mean, rff_var = B.rff_predict(rff, B.rff_features(rff, model.features(grid).data))
        rff_mean = rff_mean + gp.mean_const.data[0]
        rff_std = np.sqrt(np.maximum(rff_var - rff.noise, 0.0))
        tag = f"n{n}"
        series.update({f"due_mean_{tag}": due_mean, f"due_std_{tag}": due_std,
                       f"rff_mean_{tag}": rff_mean, f"rff_std_{tag}": rff_std})
        metrics[tag] = {
            "due_gap_std": float(due_std[gap].mean()),
            "due_support_std": float(due_std[support].mean()),
            "rff_gap_std": float(rff_std[gap].mean()),
            "rff_support_std": float(rff_std[support].mean()),
            "noise": gp.likelihood.noise,
        }
    return {"metrics": metrics, "series": series, "provenance": {"generator": "gap_regression", "seed": seed,
                                                                  "sizes": list(p.sizes)}}


def run_gap_1d(seed: int = 0, n: int = 1_000, protocol: GapProtocol | None = None) -> dict:
    """DUE on the two-interval regression task: predictive mean and std over a grid."""
    p = protocol or GapProtocol()
    data = D.gen_gap_regression(n, seed)
    model = fit_due(*gap_configs(p, n, seed), data)
    grid = np.linspace(-8.0, 8.0, p.grid_points)[:, None]
    pred = model.predict(grid)
    std = np.sqrt(pred.variance[:, 0])
    noise = model.gp.likelihood.noise
    gap, support = _gap_masks(grid)
    train_pred = model.predict(data.X)
    return {
        "metrics": {"train_rmse": M.rmse(train_pred.mean[:, 0], data.Y[:, 0]),
                    "gap_std": float(std[gap].mean()), "support_std": float(std[support].mean()), "noise": noise},
        "series": {"x": grid[:, 0], "mean": pred.mean[:, 0], "std": std,
                   "std_with_noise": np.sqrt(pred.variance[:, 0] + noise)},
        "provenance": data.provenance,
    }


# ---------------------------------------------------------------------------
# Treatment effects with deferral
# ---------------------------------------------------------------------------


@dataclass
class CateProtocol:
    n: int = 750
    epochs: int = 200
    lr: float = 0.001
    batch_size: int = 100
    num_inducing: int = 100
    mc_samples: int = 1000
    rates: tuple = (0.1, 0.5)


def cate_configs(p: CateProtocol, seed: int):
    fe = FeatureExtractorConfig(D.CATE_DIM, 200, 3, 0.95, dropout_rate=0.1, activation="elu")
    cfg = TrainConfig(optimizer="adam", lr=p.lr, epochs=p.epochs, batch_size=p.batch_size,
                      num_inducing=p.num_inducing, kernel="matern32", append_treatment=True,
                      select_on_val=True, noise_init=0.6931, seed=seed)
    return fe, cfg


def cate_trial(seed: int, protocol: CateProtocol | None = None) -> dict:
    """One seeded trial: train on standardised outcomes, select on validation NLL, defer on test."""
    p = protocol or CateProtocol()
    data = D.gen_synthetic_cate(p.n, seed)
    tr, va, te = data.subset("train"), data.subset("val"), data.subset("test")
    y_mean, y_std = float(tr.Y.mean()), float(tr.Y.std())
    tr.Y = (tr.Y - y_mean) / y_std
    va.Y = (va.Y - y_mean) / y_std
    model = fit_due(*cate_configs(p, seed), tr, va)
    est = M.cate_estimate(model, te.X, p.mc_samples, np.random.default_rng(seed))
    mean, var = est.mean * y_std, est.variance * y_std**2
    row = {"seed": seed, "test_rmse": M.rmse(mean, te.cate)}
    for rate in p.rates:
        for policy in ("uncertainty", "random"):
            res = M.deferral_curve(mean, te.cate, var, rate, policy, seed)
            row[f"{policy}_{rate:g}"] = res.retained_rmse
    return row


def run_cate_deferral(trials: int = 100, protocol: CateProtocol | None = None, first_seed: int = 0) -> dict:
    rows = [cate_trial(first_seed + i, protocol) for i in range(trials)]
    p = protocol or CateProtocol()
    summary = {"trials": trials, "test_rmse": float(np.mean([r["test_rmse"] for r in rows]))}
    for rate in p.rates:
        unc = float(np.mean([r[f"uncertainty_{rate:g}"] for r in rows]))
        rnd = float(np.mean([r[f"random_{rate:g}"] for r in rows]))
        summary[f"rate_{rate:g}"] = {"uncertainty": unc, "random": rnd, "improvement": 1.0 - unc / rnd}
    return {"metrics": summary, "rows": rows}


# ---------------------------------------------------------------------------
# Exact-GP marginal likelihood diagnostics
# ---------------------------------------------------------------------------


def _toy_features(seed: int, n: int):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, (n, 2))
    return x, np.sin(x[:, 0]) * np.cos(x[:, 1])


def run_scale_fit(seed: int = 0, n: int = 50, noise_ratio: float = 0.01, lengthscale: float = 1.0) -> dict:
    """Optimise the signal scale of an exact GP and report the data-fit term against -n/2."""
    x, y = _toy_features(seed, n)
    y = y + 0.1 * np.random.default_rng(seed + 1).standard_normal(n)
    gram = G.kernel_matrix("rbf", lengthscale, 1.0, x, x)
    scale, ml = G.optimize_signal_scale(gram, y, noise_ratio)
    rel = abs(ml.data_fit + n / 2) / (n / 2)
    # objective profile around the optimum for plotting
    scales = scale * np.exp(np.linspace(-3.0, 3.0, 61))
    profile = [G.exact_gp_marginal(gram, y, s, noise_ratio * s) for s in scales]
    return {
        "metrics": {"signal_scale": scale, "data_fit": ml.data_fit, "target": -n / 2,
                    "relative_error": rel, "total": ml.total},
        "series": {"signal_scale": scales, "total": np.array([m.total for m in profile]),
                   "data_fit": np.array([m.data_fit for m in profile])},
        "provenance": {"generator": "toy_features", "seed": seed, "n": n, "noise_ratio": noise_ratio},
    }


def run_collapse_path(seed: int = 0, n: int = 50, steps: int = 20, lengthscale: float = 1.0) -> dict:
    """Pull two rows with equal targets together while the noise is re-learned at every step.

    The pair sits away from the other rows so that only its own geometry
    changes along the path.
    """
    x, y = _toy_features(seed, n - 2)
    x = np.vstack([[10.0, 10.0], [12.0, 10.0], x])
    y = np.concatenate([[0.5, 0.5], y])
    path = G.collapse_path("rbf", lengthscale, x, y, pair=(0, 1), steps=steps)
    penalty = np.array([s.marginal.complexity_penalty for s in path])
    steps_diff = np.diff(penalty)
    return {
        "metrics": {"strictly_decreasing": bool(np.all(steps_diff < 0)), "max_step_change": float(steps_diff.max()),
                    "total_decrease": float(penalty[0] - penalty[-1])},
        "series": {"fraction": np.array([s.fraction for s in path]), "complexity_penalty": penalty,
                   "noise_var": np.array([s.noise_var for s in path]),
                   "data_fit": np.array([s.marginal.data_fit for s in path])},
        "provenance": {"generator": "toy_features", "seed": seed, "n": n, "pair": [[10.0, 10.0], [12.0, 10.0]]},
    }
