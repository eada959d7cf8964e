"""Reverse-mode automatic differentiation over dense float64 arrays.

Each differentiable operation is a forward function plus a vector-Jacobian
rule stored in ``GRAD_RULES`` under the operation's name. Rules are looked up
at backward time, so a rule can be swapped out (e.g. by the self-check's
negative control) without rebuilding any graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

# name -> rule(grad_out, ctx, *parent_data) -> tuple of parent grads (or None)
GRAD_RULES: dict[str, Callable] = {}


def grad_rule(name: str):
    def register(fn):
        GRAD_RULES[name] = fn
        return fn

    return register


class Tensor:
    """Dense array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "ctx")
    # make ndarray <op> Tensor dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out.ctx = ctx
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``root``.

    Leaf gradients accumulate across calls; callers reset them with
    ``zero_grad`` between optimizer steps.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        rule = GRAD_RULES[node.op]
        parent_grads = rule(g, node.ctx, *(p.data for p in node.parents))
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=DTYPE), parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, "add", (a, b))


@grad_rule("add")
def _add_grad(g, ctx, a, b):
    return g, g


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, "sub", (a, b))


@grad_rule("sub")
def _sub_grad(g, ctx, a, b):
    return g, -g


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, "mul", (a, b))


@grad_rule("mul")
def _mul_grad(g, ctx, a, b):
    return g * b, g * a


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, "div", (a, b))


@grad_rule("div")
def _div_grad(g, ctx, a, b):
    return g / b, -g * a / (b * b)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,))


@grad_rule("neg")
def _neg_grad(g, ctx, a):
    return (-g,)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data**exponent, "power", (a,), exponent)


@grad_rule("power")
def _power_grad(g, exponent, a):
    return (g * exponent * a ** (exponent - 1),)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, "square", (a,))


@grad_rule("square")
def _square_grad(g, ctx, a):
    return (2.0 * g * a,)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), out)


@grad_rule("exp")
def _exp_grad(g, out, a):
    return (g * out,)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), "log", (a,))


@grad_rule("log")
def _log_grad(g, ctx, a):
    return (g / a,)


def sqrt(a) -> Tensor:
    """Square root whose derivative is taken as 0 at exactly 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), out)


@grad_rule("sqrt")
def _sqrt_grad(g, out, a):
    safe = np.where(out > 0, out, 1.0)
    return (np.where(out > 0, g / (2.0 * safe), 0.0),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.data, 0.0), "relu", (a,))


@grad_rule("relu")
def _relu_grad(g, ctx, a):
    return (g * (a > 0),)


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    return _node(np.where(a.data > 0, a.data, neg_part), "elu", (a,), alpha)


@grad_rule("elu")
def _elu_grad(g, alpha, a):
    return (g * np.where(a > 0, 1.0, alpha * np.exp(np.minimum(a, 0.0))),)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), out)


@grad_rule("tanh")
def _tanh_grad(g, out, a):
    return (g * (1.0 - out * out),)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.data), "softplus", (a,))


@grad_rule("softplus")
def _softplus_grad(g, ctx, a):
    return (g / (1.0 + np.exp(-a)),)


def clamp_min(a, low: float) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.data, low), "clamp_min", (a,), low)


@grad_rule("clamp_min")
def _clamp_min_grad(g, low, a):
    return (g * (a > low),)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), "abs", (a,))


@grad_rule("abs")
def _abs_grad(g, ctx, a):
    return (g * np.sign(a),)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), (axis, keepdims))


@grad_rule("sum")
def _sum_grad(g, ctx, a):
    axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    peak = a.data.max(axis=axis, keepdims=True)
    lse = peak + np.log(np.exp(a.data - peak).sum(axis=axis, keepdims=True))
    soft = np.exp(a.data - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)
    return _node(out, "logsumexp", (a,), (axis, keepdims, soft))


@grad_rule("logsumexp")
def _logsumexp_grad(g, ctx, a):
    axis, keepdims, soft = ctx
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (g * soft,)


def log_softmax(a, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), "reshape", (a,))


@grad_rule("reshape")
def _reshape_grad(g, ctx, a):
    return (g.reshape(a.shape),)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), "transpose", (a,))


@grad_rule("transpose")
def _transpose_grad(g, ctx, a):
    return (np.swapaxes(g, -1, -2),)


def take(a, index) -> Tensor:
    a = as_tensor(a)
    return _node(a.data[index], "take", (a,), index)


@grad_rule("take")
def _take_grad(g, index, a):
    out = np.zeros_like(a)
    np.add.at(out, index, g)
    return (out,)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, "concat", tensors, (axis, np.cumsum(sizes)[:-1]))


@grad_rule("concat")
def _concat_grad(g, ctx, *parents):
    axis, splits = ctx
    return tuple(np.split(g, splits, axis=axis))


def diagonal(a) -> Tensor:
    """Main diagonal of a square matrix, as a vector."""
    a = as_tensor(a)
    return _node(np.diagonal(a.data).copy(), "diagonal", (a,))


@grad_rule("diagonal")
def _diagonal_grad(g, ctx, a):
    return (np.diag(g),)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, "matmul", (a, b))


@grad_rule("matmul")
def _matmul_grad(g, ctx, a, b):
    if b.ndim == 1:
        return np.multiply.outer(g, b), np.swapaxes(a, -1, -2) @ g
    if a.ndim == 1:
        return g @ np.swapaxes(b, -1, -2), np.multiply.outer(a, g)
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def pairwise_sqdist(a, b) -> Tensor:
    """Squared Euclidean distances between rows of ``a`` [n, d] and ``b`` [m, d]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise_sqdist needs [n,d] and [m,d], got {a.shape}, {b.shape}")
    raw = (
        np.sum(a.data**2, axis=1)[:, None]
        + np.sum(b.data**2, axis=1)[None, :]
        - 2.0 * a.data @ b.data.T
    )
    mask = raw > 0
    return _node(np.where(mask, raw, 0.0), "pairwise_sqdist", (a, b), mask)


@grad_rule("pairwise_sqdist")
def _pairwise_sqdist_grad(g, mask, a, b):
    g = g * mask
    ga = 2.0 * (g.sum(axis=1)[:, None] * a - g @ b)
    gb = 2.0 * (g.sum(axis=0)[:, None] * b - g.T @ a)
    return ga, gb
