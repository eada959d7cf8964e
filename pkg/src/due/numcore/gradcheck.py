"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_grads(fn: Callable[[], Tensor], leaves: Sequence[Tensor], step: float = 1e-5) -> float:
    """Relative error between backprop and finite differences over the joint gradient of ``leaves``.

    Leaves whose true gradient is exactly zero (a bias feeding batch norm, say)
    are judged against the scale of the whole gradient, not their own.
    """
    for leaf in leaves:
        leaf.zero_grad()
    fn().backward()
    analytic, numeric = [], []
    for leaf in leaves:
        analytic.append((leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).ravel())
        numeric.append(numeric_grad(fn, leaf, step).ravel())
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))
