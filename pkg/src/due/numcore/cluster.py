"""k-means (Lloyd with k-means++ seeding) and power iteration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a**2, 1)[:, None] + np.sum(b**2, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    p = len(points)
    centroids = [points[rng.integers(p)]]
    closest = _sqdist(points, centroids[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a centroid
            idx = rng.integers(p)
        else:
            idx = rng.choice(p, p=closest / total)
        centroids.append(points[idx])
        closest = np.minimum(closest, _sqdist(points, points[idx][None, :])[:, 0])
    return np.array(centroids)


def kmeans_fit(points, k: int, seed=0, max_iter: int = 100, tol: float = 0.0) -> KMeansResult:
    points = np.asarray(points, dtype=np.float64)
    p = len(points)
    if k < 1 or p < k:
        raise ValueError(f"kmeans needs 1 <= k <= number of points, got k={k}, p={p}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus(points, k, rng)
    history: list[float] = []
    labels = np.zeros(p, dtype=int)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d = _sqdist(points, centroids)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(p), labels].sum()))
        new = np.empty_like(centroids)
        counts = np.bincount(labels, minlength=k)
        taken: set[int] = set()
        for j in range(k):
            if counts[j]:
                new[j] = points[labels == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            # empty cluster: reseed at the point farthest from its centroid
            own = d[np.arange(p), labels].copy()
            own[list(taken)] = -1.0
            far = int(np.argmax(own))
            taken.add(far)
            new[j] = points[far]
        shift = float(np.max(np.abs(new - centroids)))
        centroids = new
        if shift <= tol:
            break
    d = _sqdist(points, centroids)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(p), labels].sum())
    return KMeansResult(centroids, labels, inertia, n_iter, history)


def kmeans(points, k: int, seed=0) -> np.ndarray:
    """Centroids [k, d] of Lloyd's algorithm from k-means++ seeding."""
    return kmeans_fit(points, k, seed).centroids


def power_iteration(w, u, iters: int = 1, eps: float = 1e-12, tol: float | None = None) -> tuple[float, np.ndarray]:
    """Estimate the largest singular value of ``w`` [a, b].

    ``u`` is the left-vector state (length a) carried between calls for warm
    starts. Returns ``(sigma, u_new)``; ``sigma = u' w v`` never exceeds the
    true spectral norm. With ``tol`` set, iteration stops early once the
    estimate changes by less than ``tol`` relative to itself.
    """
    w = np.asarray(w, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(w):
        return 0.0, u
    sigma = 0.0
    for _ in range(iters):
        v = w.T @ u
        v /= max(np.linalg.norm(v), eps)
        u = w @ v
        norm = np.linalg.norm(u)
        if norm < eps:
            return 0.0, u
        u = u / norm
        previous, sigma = sigma, float(u @ w @ v)
        if tol is not None and abs(sigma - previous) <= tol * sigma:
            break
    return sigma, u
