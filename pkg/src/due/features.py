"""Residual fully connected feature extractor with spectral normalisation.

The network is an input linear map (no activation) followed by ``depth``
blocks ``h <- h + f(h)`` with ``f = dropout(act(bn(W h + b)))``. Setting
``residual=False`` and ``spectral_normalization=False`` gives the plain
feed-forward extractor used as the unconstrained comparison.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor


ACTIVATIONS = {"relu": nc.relu, "elu": nc.elu, "tanh": nc.tanh}


@dataclass
class FeatureExtractorConfig:
    input_dim: int
    feature_dim: int = 128
    depth: int = 4
    spectral_coeff: float = 0.95
    power_iterations: int = 1
    dropout_rate: float = 0.0
    use_batchnorm: bool = False
    activation: str = "relu"
    residual: bool = True
    spectral_normalization: bool = True

    def __post_init__(self):
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ValueError("input_dim and feature_dim must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.spectral_coeff <= 0:
            raise ValueError("spectral_coeff must be > 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.power_iterations < 1:
            raise ValueError("power_iterations must be >= 1")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def create(cls, width: int, momentum: float = 0.99, eps: float = 1e-5) -> BatchNormState:
        return cls(
            Tensor(np.ones(width), requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True),
            np.zeros(width),
            np.ones(width),
            momentum,
            eps,
        )

    def lipschitz(self) -> float:
        return float(np.max(np.abs(self.gamma.data / np.sqrt(self.running_var + self.eps))))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            mu = nc.mean(x, axis=0, keepdims=True)
            centred = x - mu
            var = nc.mean(nc.square(centred), axis=0, keepdims=True)
            n = x.shape[0]
            unbiased = var.data[0] * n / max(n - 1, 1)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu.data[0]
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * unbiased
            normed = centred / nc.sqrt(var + self.eps)
        else:
            normed = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return normed * self.gamma + self.beta


def batchnorm_constrain(bn: BatchNormState, coeff: float) -> BatchNormState:
    """Scale ``gamma`` in place so the eval-mode layer is ``coeff``-Lipschitz."""
    lip = bn.lipschitz()
    if lip > coeff:
        bn.gamma.data *= coeff / lip
    return bn


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


INIT_POWER_ITERATIONS = 15
SETTLE_ITERATIONS = 1000
SETTLE_TOL = 1e-7


@dataclass
class Linear:
    weight: Tensor  # [out, in]
    bias: Tensor
    u: np.ndarray  # power-iteration state, length out

    @classmethod
    def create(cls, n_in: int, n_out: int, rng: np.random.Generator) -> Linear:
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-bound, bound, size=n_out)
        u = rng.standard_normal(n_out)
        # warm start so the first one-step estimates already track sigma
        _, u = nc.power_iteration(w, u / np.linalg.norm(u), INIT_POWER_ITERATIONS)
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), u)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight.T + self.bias

    def normalize(self, coeff: float, iters: int, tol: float | None = None) -> float:
        sigma, self.u = nc.power_iteration(self.weight.data, self.u, iters, tol=tol)
        if sigma > coeff:
            self.weight.data *= coeff / sigma
        return sigma


@dataclass
class Block:
    linear: Linear
    bn: BatchNormState | None = None


@dataclass
class LipschitzReport:
    input_sigma: float
    block_sigmas: list[float]
    bn_lipschitz: list[float]
    block_bounds: list[float]
    product_bound: float


def spectral_norm_exact(w: np.ndarray) -> float:
    """Largest singular value from a full SVD."""
    return float(np.linalg.norm(w, 2)) if np.any(w) else 0.0


class FeatureExtractor:
    def __init__(self, config: FeatureExtractorConfig, rng: np.random.Generator):
        self.config = config
        self.input_map = Linear.create(config.input_dim, config.feature_dim, rng)
        self.blocks: list[Block] = []
        for _ in range(config.depth):
            bn = BatchNormState.create(config.feature_dim) if config.use_batchnorm else None
            self.blocks.append(Block(Linear.create(config.feature_dim, config.feature_dim, rng), bn))

    def _act(self, x: Tensor) -> Tensor:
        return ACTIVATIONS[self.config.activation](x)

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = nc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected inputs [n, {self.config.input_dim}], got {x.shape}")
        h = self.input_map(x)
        for block in self.blocks:
            z = block.linear(h)
            if block.bn is not None:
                z = block.bn(z, train)
            z = dropout(self._act(z), self.config.dropout_rate, rng, train)
            h = h + z if self.config.residual else z
        return h

    __call__ = forward

    def linears(self) -> list[Linear]:
        return [self.input_map] + [b.linear for b in self.blocks]

    def parameters(self) -> list[Tensor]:
        params = []
        for lin in self.linears():
            params += [lin.weight, lin.bias]
        for block in self.blocks:
            if block.bn is not None:
                params += [block.bn.gamma, block.bn.beta]
        return params

    def spectral_normalize(self, coeff: float | None = None, iters: int | None = None,
                           settle: bool = False) -> list[float]:
        """Rescale every linear map to spectral norm <= coeff (and constrain BN).

        ``settle=True`` runs the power iteration to convergence instead of
        the configured step count, so the resulting weights respect ``coeff``
        to within the iteration tolerance.
        """
        coeff = self.config.spectral_coeff if coeff is None else coeff
        iters = self.config.power_iterations if iters is None else iters
        tol = None
        if settle:
            iters, tol = max(iters, SETTLE_ITERATIONS), SETTLE_TOL
        sigmas = [lin.normalize(coeff, iters, tol) for lin in self.linears()]
        for block in self.blocks:
            if block.bn is not None:
                batchnorm_constrain(block.bn, coeff)
        return sigmas

    def lipschitz_audit(self) -> LipschitzReport:
        input_sigma = spectral_norm_exact(self.input_map.weight.data)
        sigmas, bn_lips, bounds = [], [], []
        for block in self.blocks:
            s = spectral_norm_exact(block.linear.weight.data)
            lip_bn = block.bn.lipschitz() if block.bn is not None else 1.0
            sigmas.append(s)
            bn_lips.append(lip_bn)
            branch = s * lip_bn
            bounds.append(1.0 + branch if self.config.residual else branch)
        return LipschitzReport(input_sigma, sigmas, bn_lips, bounds, float(input_sigma * np.prod(bounds)))

    # -- persistence -----------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, lin in enumerate(self.linears()):
            out[f"linear{i}.weight"] = lin.weight.data
            out[f"linear{i}.bias"] = lin.bias.data
            out[f"linear{i}.u"] = lin.u
        for i, block in enumerate(self.blocks):
            if block.bn is not None:
                out[f"bn{i}.gamma"] = block.bn.gamma.data
                out[f"bn{i}.beta"] = block.bn.beta.data
                out[f"bn{i}.running_mean"] = block.bn.running_mean
                out[f"bn{i}.running_var"] = block.bn.running_var
        return {k: np.array(v, copy=True) for k, v in out.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, lin in enumerate(self.linears()):
            lin.weight.data = np.array(state[f"linear{i}.weight"], dtype=np.float64)
            lin.bias.data = np.array(state[f"linear{i}.bias"], dtype=np.float64)
            lin.u = np.array(state[f"linear{i}.u"], dtype=np.float64)
        for i, block in enumerate(self.blocks):
            if block.bn is not None:
                block.bn.gamma.data = np.array(state[f"bn{i}.gamma"], dtype=np.float64)
                block.bn.beta.data = np.array(state[f"bn{i}.beta"], dtype=np.float64)
                block.bn.running_mean = np.array(state[f"bn{i}.running_mean"], dtype=np.float64)
                block.bn.running_var = np.array(state[f"bn{i}.running_var"], dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.config)
