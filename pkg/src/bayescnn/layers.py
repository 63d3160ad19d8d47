"""Bayesian and frequentist layers.

Each Bayesian layer carries a factorized Gaussian posterior over its weights,
parameterized by a mean ``mu`` and an unconstrained ``rho`` with
``sigma = softplus(rho)``. Two stochastic forward passes are available:

* local reparameterization: sample the pre-activations directly from
  ``N(A * mu, A^2 * sigma^2)`` using one mean and one variance operation;
* weight sampling: draw ``w = mu + sigma * eps`` and apply it once.

No layer has a bias term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import SeededRng, Tensor

# Added inside the square root of the activation variance.
VARIANCE_FLOOR = 1e-8
RHO_INIT = -10.0
MU_INIT_STD = 0.1

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean Gaussian prior ``N(0, sigma_p^2)`` shared by every weight."""

    sigma_p: float = 1.0

    def __post_init__(self):
        if not self.sigma_p > 0:
            raise ValueError(f"prior sigma_p must be positive, got {self.sigma_p}")


class VariationalGaussianParameterSet:
    """Per-weight ``(mu, rho)`` with an optional retention mask.

    Masked-out weights behave as if deleted: their mean is read as zero, their
    variance contributes nothing, and they drop out of the KL sum.
    """

    def __init__(self, mu, rho, name: str = ""):
        self.mu = Tensor(mu, requires_grad=True, name=f"{name}.mu")
        self.rho = Tensor(rho, requires_grad=True, name=f"{name}.rho")
        if self.mu.shape != self.rho.shape:
            raise T.DimensionError("mu and rho shapes differ")
        self.mask: np.ndarray | None = None

    @classmethod
    def initialize(cls, shape, rng: SeededRng, name: str = "",
                   mu_std: float = MU_INIT_STD, rho_init: float = RHO_INIT):
        return cls(mu_std * rng.normal(shape), np.full(shape, float(rho_init)), name)

    @property
    def shape(self) -> tuple:
        return self.mu.shape

    def sigma(self) -> Tensor:
        return T.softplus(self.rho)

    def sigma_values(self) -> np.ndarray:
        return T._softplus(self.rho.data)

    def alpha(self) -> np.ndarray:
        """``sigma^2 / mu^2`` where mu is nonzero, NaN elsewhere."""
        mu2 = self.mu.data ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(mu2 > 0, self.sigma_values() ** 2 / mu2, np.nan)

    def effective_mu(self) -> Tensor:
        if self.mask is None:
            return self.mu
        return T.mul(self.mu, self.mask.astype(np.float64))

    def effective_variance(self) -> Tensor:
        var = T.square(self.sigma())
        if self.mask is None:
            return var
        return T.mul(var, self.mask.astype(np.float64))

    def sample(self, rng: SeededRng) -> Tensor:
        """``w = mu + sigma * eps`` (masked positions are exactly zero)."""
        eps = rng.normal(self.shape)
        w = T.add(self.mu, T.mul(self.sigma(), eps))
        if self.mask is not None:
            w = T.mul(w, self.mask.astype(np.float64))
        return w

    def parameters(self) -> list:
        return [self.mu, self.rho]

    def num_scalars(self) -> int:
        return self.mu.size + self.rho.size


def kl_closed_form(params: VariationalGaussianParameterSet, prior: PriorSpec) -> Tensor:
    """Sum over weights of ``KL(N(mu, sigma^2) || N(0, sigma_p^2))``."""
    sp2 = prior.sigma_p ** 2
    sigma = params.sigma()
    per_weight = (math.log(prior.sigma_p) - T.log(sigma)
                  + T.scale(T.add(T.square(sigma), T.square(params.mu)), 1.0 / (2.0 * sp2))
                  - 0.5)
    if params.mask is not None:
        per_weight = T.mul(per_weight, params.mask.astype(np.float64))
    return T.reduce_sum(per_weight)


def log_q_minus_log_p(params: VariationalGaussianParameterSet, w: Tensor,
                      prior: PriorSpec) -> Tensor:
    """``log q(w) - log p(w)`` for one weight draw, summed over retained weights."""
    sigma = params.sigma()
    z = T.div(T.sub(w, params.mu), sigma)
    log_q = T.scale(T.square(z), -0.5) - T.log(sigma) - 0.5 * LOG_2PI
    log_p = (T.scale(T.square(w), -0.5 / prior.sigma_p ** 2)
             - (math.log(prior.sigma_p) + 0.5 * LOG_2PI))
    diff = T.sub(log_q, log_p)
    if params.mask is not None:
        diff = T.mul(diff, params.mask.astype(np.float64))
    return T.reduce_sum(diff)


def kl_monte_carlo(params: VariationalGaussianParameterSet, prior: PriorSpec,
                   n_draws: int, rng: SeededRng) -> Tensor:
    """Average of ``log q(w) - log p(w)`` over ``n_draws`` fresh posterior draws."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    total = None
    for _ in range(n_draws):
        term = log_q_minus_log_p(params, params.sample(rng), prior)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / n_draws)


def kl_monte_carlo_samples(params: VariationalGaussianParameterSet, prior: PriorSpec,
                           n_draws: int, rng: SeededRng) -> np.ndarray:
    """Per-draw values of ``log q - log p`` (plain arrays, for statistics)."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    mu, sigma = params.mu.data.ravel(), params.sigma_values().ravel()
    keep = np.ones(mu.shape) if params.mask is None else params.mask.astype(np.float64).ravel()
    out = np.empty(n_draws)
    chunk = max(1, 2 ** 20 // mu.size)
    for start in range(0, n_draws, chunk):
        n = min(chunk, n_draws - start)
        eps = rng.normal((n, mu.size))
        w = mu + sigma * eps
        lq = -0.5 * eps ** 2 - np.log(sigma)
        lp = -0.5 * (w / prior.sigma_p) ** 2 - math.log(prior.sigma_p)
        out[start:start + n] = ((lq - lp) * keep).sum(axis=1)
    return out


# --- layers ------------------------------------------------------------------


class BayesianLayer:
    """Shared behaviour of Bayesian conv and linear layers."""

    bayesian = True
    params: VariationalGaussianParameterSet

    def _apply(self, x, w) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list:
        return self.params.parameters()

    def named_parameters(self) -> dict:
        return {"mu": self.params.mu, "rho": self.params.rho}

    def num_scalars(self) -> int:
        return self.params.num_scalars()

    def forward(self, x, rng: SeededRng | None = None, mode: str = "local") -> Tensor:
        if mode == "local":
            return forward_local_reparam(self, x, rng)
        if mode == "sample":
            return forward_weight_sampling(self, x, rng)[0]
        if mode == "mean":
            return self._apply(x, self.params.effective_mu())
        raise ValueError(f"unknown forward mode {mode!r}")

    __call__ = forward


class BayesianConv2d(BayesianLayer):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng: SeededRng | None = None, rho_init=RHO_INIT, mu_std=MU_INIT_STD,
                 name="conv"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.params = VariationalGaussianParameterSet.initialize(
            shape, rng or SeededRng(0), name, mu_std=mu_std, rho_init=rho_init)

    def _apply(self, x, w):
        return T.conv2d(x, w, self.stride, self.padding)


class BayesianLinear(BayesianLayer):
    def __init__(self, in_features, out_features, rng: SeededRng | None = None,
                 rho_init=RHO_INIT, mu_std=MU_INIT_STD, name="fc"):
        self.in_features = in_features
        self.out_features = out_features
        self.params = VariationalGaussianParameterSet.initialize(
            (out_features, in_features), rng or SeededRng(0), name,
            mu_std=mu_std, rho_init=rho_init)

    def _apply(self, x, w):
        return T.linear(x, w)


def forward_local_reparam(layer: BayesianLayer, x, rng: SeededRng) -> Tensor:
    """Sample activations ``b = A*mu + eps * sqrt(A^2 * sigma^2 + floor)``.

    ``eps`` is fresh standard-normal noise per output element and is held
    constant in the graph, so the result is differentiable in mu and rho.
    """
    x = T.as_tensor(x)
    mean = layer._apply(x, layer.params.effective_mu())
    var = layer._apply(T.square(x), layer.params.effective_variance())
    eps = rng.normal(mean.shape)
    return T.add(mean, T.mul(T.sqrt(T.add(var, VARIANCE_FLOOR)), eps))


def forward_weight_sampling(layer: BayesianLayer, x, rng: SeededRng):
    """Draw one weight tensor from the posterior and apply it; returns
    ``(activations, sampled_weights)``."""
    w = layer.params.sample(rng)
    return layer._apply(T.as_tensor(x), w), w


class Conv2d:
    """Frequentist (point estimate) convolution twin."""

    bayesian = False

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng: SeededRng | None = None, init_std=MU_INIT_STD, name="conv"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Tensor(init_std * (rng or SeededRng(0)).normal(shape),
                             requires_grad=True, name=f"{name}.weight")

    def parameters(self):
        return [self.weight]

    def named_parameters(self):
        return {"weight": self.weight}

    def num_scalars(self):
        return self.weight.size

    def forward(self, x, rng=None, mode="local"):
        return T.conv2d(x, self.weight, self.stride, self.padding)

    __call__ = forward


class Linear:
    """Frequentist fully-connected twin."""

    bayesian = False

    def __init__(self, in_features, out_features, rng: SeededRng | None = None,
                 init_std=MU_INIT_STD, name="fc"):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(init_std * (rng or SeededRng(0)).normal((out_features, in_features)),
                             requires_grad=True, name=f"{name}.weight")

    def parameters(self):
        return [self.weight]

    def named_parameters(self):
        return {"weight": self.weight}

    def num_scalars(self):
        return self.weight.size

    def forward(self, x, rng=None, mode="local"):
        return T.linear(x, self.weight)

    __call__ = forward


class Softplus:
    bayesian = False

    def __init__(self, beta: float = 1.0):
        self.beta = beta

    def parameters(self):
        return []

    def named_parameters(self):
        return {}

    def num_scalars(self):
        return 0

    def forward(self, x, rng=None, mode="local"):
        return T.softplus(x, self.beta)

    __call__ = forward


class MaxPool2d:
    bayesian = False

    def __init__(self, window: int = 2, stride: int = 2):
        self.window = window
        self.stride = stride

    def parameters(self):
        return []

    def named_parameters(self):
        return {}

    def num_scalars(self):
        return 0

    def forward(self, x, rng=None, mode="local"):
        return T.maxpool2d(x, self.window, self.stride)

    __call__ = forward


class Flatten:
    bayesian = False

    def parameters(self):
        return []

    def named_parameters(self):
        return {}

    def num_scalars(self):
        return 0

    def forward(self, x, rng=None, mode="local"):
        return T.flatten(x)

    __call__ = forward
