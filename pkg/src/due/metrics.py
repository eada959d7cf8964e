"""Accuracy, calibration, OoD and treatment-effect metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def auroc(scores_in, scores_out) -> float:
    """P(out score > in score) with ties counted one half (Mann-Whitney U)."""
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if len(s_in) == 0 or len(s_out) == 0:
        raise ValueError("auroc needs non-empty score sets")
    ranks = rankdata(np.concatenate([s_in, s_out]))
    u = ranks[len(s_in):].sum() - len(s_out) * (len(s_out) + 1) / 2.0
    return float(u / (len(s_in) * len(s_out)))


def ece(probs, labels, bins: int = 15) -> float:
    """Expected calibration error over equal-width bins of max probability."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        mask = idx == b
        if mask.any():
            total += mask.mean() * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def _check_lengths(*arrays) -> list[np.ndarray]:
    out = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    if len({len(a) for a in out}) != 1:
        raise ValueError(f"length mismatch: {[len(a) for a in out]}")
    return out


def rmse(pred, target) -> float:
    pred, target = _check_lengths(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def gaussian_nll(mean, var, target) -> float:
    mean, var, target = _check_lengths(mean, var, target)
    return float(np.mean(0.5 * np.log(2 * math.pi * var) + 0.5 * (target - mean) ** 2 / var))


def classification_nll(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if len(probs) != len(labels):
        raise ValueError("length mismatch")
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# Treatment effects and deferral
# ---------------------------------------------------------------------------


@dataclass
class CATEEstimate:
    mean: np.ndarray
    variance: np.ndarray
    mc_samples: int


def cate_from_joint(mean0, mean1, var0, var1, cov01, mc_samples: int = 1000, rng=None) -> CATEEstimate:
    """Effect mean from the posterior means; effect variance by sampling each row's 2x2 joint."""
    mean0, mean1, var0, var1, cov01 = _check_lengths(mean0, mean1, var0, var1, cov01)
    rng = np.random.default_rng(0) if rng is None else rng
    l11 = np.sqrt(np.maximum(var0, 0.0))
    l21 = np.where(l11 > 0, cov01 / np.where(l11 > 0, l11, 1.0), 0.0)
    l22 = np.sqrt(np.maximum(var1 - l21**2, 0.0))
    eps = rng.standard_normal((mc_samples, len(mean0), 2))
    y0 = mean0 + l11 * eps[..., 0]
    y1 = mean1 + l21 * eps[..., 0] + l22 * eps[..., 1]
    diff = y1 - y0
    return CATEEstimate(mean1 - mean0, diff.var(axis=0, ddof=1), mc_samples)


def cate_estimate(model, x, mc_samples: int = 1000, rng=None) -> CATEEstimate:
    """CATE mean and variance from a regression model with an appended treatment input."""
    if getattr(model, "is_classifier", True) or not model.config.append_treatment:
        raise TypeError("cate_estimate needs a regression model taking a treatment indicator")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    f0 = model.features(x, np.zeros(n)).data
    f1 = model.features(x, np.ones(n)).data
    joint = model.gp.predict_pair(f0, f1)
    return cate_from_joint(
        joint["mean_a"], joint["mean_b"], joint["var_a"], joint["var_b"], joint["cov_ab"], mc_samples, rng
    )


@dataclass
class DeferralResult:
    rate: float
    retained_rmse: float
    policy: str
    n_retained: int
    seed: int | None = None


def deferral_curve(pred, target, uncertainty, rate: float, policy: str = "uncertainty", seed: int = 0) -> DeferralResult:
    """RMSE on the rows kept after deferring a fraction ``rate`` of them.

    ``uncertainty`` defers the ``ceil(rate * n)`` most uncertain rows (ties
    broken by row index); ``random`` defers a uniform sample. The RMSE is
    NaN when nothing is retained.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"deferral rate must be in [0, 1), got {rate}")
    pred, target, uncertainty = _check_lengths(pred, target, uncertainty)
    n = len(pred)
    n_defer = int(math.ceil(rate * n - 1e-9))
    if policy == "uncertainty":
        order = np.lexsort((np.arange(n), uncertainty))
        keep = order[: n - n_defer]
    elif policy == "random":
        keep = np.sort(np.random.default_rng(seed).permutation(n)[: n - n_defer])
    else:
        raise ValueError(f"unknown deferral policy {policy!r}")
    value = rmse(pred[keep], target[keep]) if len(keep) else math.nan
    return DeferralResult(rate, value, policy, len(keep), seed if policy == "random" else None)


# ---------------------------------------------------------------------------
# Feature collapse
# ---------------------------------------------------------------------------


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d, 0.0).min(axis=1))


def feature_scatter(features) -> float:
    """Root-mean-square distance of rows from their centroid."""
    f = np.asarray(features, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum((f - f.mean(axis=0)) ** 2, axis=1))))


def rbf_logdet(features, lengthscale: float = 1.0, noise: float = 0.0) -> float:
    """log|K + noise*I| for the unit-scale RBF Gram; ``-inf`` when it is numerically singular."""
    f = np.asarray(features, dtype=np.float64)
    d2 = np.maximum(np.sum(f**2, 1)[:, None] + np.sum(f**2, 1)[None, :] - 2.0 * f @ f.T, 0.0)
    gram = np.exp(-0.5 * d2 / lengthscale**2) + noise * np.eye(len(f))
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        return -math.inf
    diag = np.diag(chol)
    if np.min(diag) <= 0:
        return -math.inf
    return float(2.0 * np.sum(np.log(diag)))


def collapse_metrics(features_in, features_ood, inputs_in, inputs_ood, star=None, lengthscale: float = 1.0,
                     noise: float = 0.0) -> dict:
    """Distance-preservation diagnostics of a feature map.

    ``star`` is an optional ``(input_point, feature_point)`` pair.
    """
    f_in = np.asarray(features_in, dtype=np.float64)
    f_ood = np.asarray(features_ood, dtype=np.float64)
    x_in = np.asarray(inputs_in, dtype=np.float64)
    x_ood = np.asarray(inputs_ood, dtype=np.float64)
    if not (len(f_in) and len(f_ood)):
        raise ValueError("collapse_metrics needs non-empty sets")
    d_feat = _nearest(f_ood, f_in)
    d_in = _nearest(x_ood, x_in)
    valid = d_in > 0
    report = {
        "contraction_ratio": float(np.median(d_feat[valid] / d_in[valid])),
        "feature_scatter": feature_scatter(f_in),
        "gram_logdet": rbf_logdet(np.vstack([f_in, f_ood]), lengthscale, noise),
    }
    if star is not None:
        x_star, f_star = (np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in star)
        dist = float(_nearest(f_star, f_in)[0])
        report["star_distance"] = dist
        report["star_distance_normalized"] = dist / report["feature_scatter"] if report["feature_scatter"] > 0 else 0.0
        report["star_input_distance"] = float(_nearest(x_star, x_in)[0])
    return report
