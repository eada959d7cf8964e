"""Cholesky factorisation and triangular solves with reverse-mode rules."""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .tensor import Tensor, _node, as_tensor, grad_rule

JITTER_START = 1e-8
JITTER_MAX = 1e-3


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a matrix stays non positive definite after jitter escalation."""

    def __init__(self, jitter: float):
        super().__init__(f"Cholesky failed with relative jitter up to {jitter:g}")
        self.jitter = jitter


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def jittered_cholesky(k: np.ndarray, jitter: float = JITTER_START) -> tuple[np.ndarray, float]:
    """Plain-array Cholesky following the jitter policy.

    ``jitter`` times the mean diagonal is added before the first attempt and
    grown tenfold per failure up to ``JITTER_MAX``. Returns the factor and the
    relative jitter that succeeded.
    """
    k = np.asarray(k, dtype=np.float64)
    n = k.shape[0]
    scale = float(np.mean(np.diag(k))) if n else 0.0
    if not np.isfinite(scale):
        raise CholeskyError(jitter)
    scale = scale if scale > 0 else 1.0
    eye = np.eye(n)
    j = jitter
    while True:
        try:
            return np.linalg.cholesky(k + (j * scale) * eye), j
        except np.linalg.LinAlgError:
            if j >= JITTER_MAX * (1 - 1e-12) or j == 0:
                raise CholeskyError(j) from None
            j = min(j * 10.0, JITTER_MAX)


def cholesky(k, jitter: float = JITTER_START) -> Tensor:
    """Lower Cholesky factor of a symmetric matrix, after jitter.

    Differentiable; the gradient is the symmetric one, so ``k`` should be
    built symmetrically (as every Gram matrix here is).
    """
    k = as_tensor(k)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got {k.shape}")
    factor, used = jittered_cholesky(k.data, jitter)
    mean_diag = float(np.mean(np.diag(k.data)))
    # jitter scale tracks mean(diag) only when it is positive
    return _node(factor, "cholesky", (k,), (factor, used if mean_diag > 0 else 0.0))


@grad_rule("cholesky")
def _cholesky_grad(g, ctx, k):
    factor, rel_jitter = ctx
    n = factor.shape[0]
    phi = np.tril(factor.T @ g)
    phi[np.diag_indices(n)] *= 0.5
    tmp = solve_triangular(factor, phi, lower=True, trans="T")
    s = solve_triangular(factor, tmp.T, lower=True, trans="T").T
    gk = 0.5 * (s + s.T)
    if rel_jitter:
        gk = gk + (rel_jitter / n) * np.trace(gk) * np.eye(n)
    return (gk,)


def triangular_solve(l, b, lower: bool = True) -> Tensor:
    """Solve ``l @ x = b`` for triangular ``l``."""
    l, b = as_tensor(l), as_tensor(b)
    if l.ndim != 2 or l.shape[0] != l.shape[1] or b.shape[0] != l.shape[0]:
        raise ValueError(f"triangular_solve shape mismatch: {l.shape}, {b.shape}")
    if np.any(np.diag(l.data) == 0):
        raise SingularMatrixError("triangular matrix has a zero on its diagonal")
    x = solve_triangular(l.data, b.data, lower=lower)
    return _node(x, "triangular_solve", (l, b), (x, lower))


@grad_rule("triangular_solve")
def _triangular_solve_grad(g, ctx, l, b):
    x, lower = ctx
    gb = solve_triangular(l, g, lower=lower, trans="T")
    gl = -(gb.reshape(gb.shape[0], -1) @ x.reshape(x.shape[0], -1).T)
    gl = np.tril(gl) if lower else np.triu(gl)
    return gl, gb


def logdet_from_cholesky(factor: np.ndarray) -> float:
    return float(2.0 * np.sum(np.log(np.diag(factor))))
