"""Minibatch negative ELBO (variational free energy).

Per minibatch ``i`` of ``M`` the loss is::

    beta_i * KL(q || p) / B  +  mean_over_draws(mean cross-entropy)

where ``B`` is the number of examples in the batch. Summed over an epoch
(``sum_i beta_i = 1``) and multiplied by ``B`` this is ``KL - log p(D | w)``,
so dividing the KL by ``B`` keeps the KL/likelihood balance of the full-data
objective while the likelihood part stays a plain per-example cross-entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (PriorSpec, forward_weight_sampling, kl_closed_form,
                     log_q_minus_log_p)
from .model import Sequential
from .tensor import NumericError, SeededRng, Tensor

KL_MODES = ("closed_form", "monte_carlo")
KL_WEIGHT_SCHEMES = ("blundell", "uniform")


def kl_weight(i: int, M: int) -> float:
    """Minibatch KL weight ``2^(M-i) / (2^M - 1)`` for batch ``i`` in ``1..M``."""
    if M < 1 or not 1 <= i <= M:
        raise ValueError(f"batch index {i} outside 1..{M}")
    if M <= 50:
        return 2.0 ** (M - i) / (2.0 ** M - 1.0)
    # log-space: (M - i) log 2 - log(2^M - 1), with log(2^M - 1) = M log 2 + log1p(-2^-M)
    return math.exp(-i * math.log(2.0) - math.log1p(-(2.0 ** -M)))


@dataclass
class ElboConfig:
    n_draws: int = 1
    kl_mode: str = "closed_form"
    kl_weight_scheme: str = "blundell"
    M: int = 1
    kl_scale: float | None = None  # None: divide the KL by the batch size

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}")
        if self.kl_weight_scheme not in KL_WEIGHT_SCHEMES:
            raise ValueError(f"kl_weight_scheme must be one of {KL_WEIGHT_SCHEMES}")

    def beta(self, batch_index: int) -> float:
        if self.kl_weight_scheme == "uniform":
            if not 1 <= batch_index <= self.M:
                raise ValueError(f"batch index {batch_index} outside 1..{self.M}")
            return 1.0 / self.M
        return kl_weight(batch_index, self.M)


def _forward_sampled_with_kl(model: Sequential, x, rng: SeededRng, prior: PriorSpec):
    """Weight-sampling forward pass that also returns ``log q - log p`` of the draws."""
    out = T.as_tensor(x)
    kl = None
    for layer in model.layers:
        if getattr(layer, "bayesian", False):
            out, w = forward_weight_sampling(layer, out, rng)
            term = log_q_minus_log_p(layer.params, w, prior)
            kl = term if kl is None else T.add(kl, term)
        else:
            out = layer(out, rng)
    return out, kl


def negative_elbo(model: Sequential, inputs, labels, config: ElboConfig, prior: PriorSpec,
                  batch_index: int, rng: SeededRng, beta: float | None = None):
    """Differentiable loss for one minibatch plus ``{"kl_term", "nll_term", "beta"}``.

    ``kl_term`` is the (unweighted) KL estimate and ``nll_term`` the mean
    cross-entropy over draws. ``beta`` overrides the configured KL weight.
    """
    if not model.bayesian_layers():
        raise ValueError("negative_elbo needs a model with at least one Bayesian layer")
    labels = np.asarray(labels)
    batch = labels.shape[0]
    if beta is None:
        beta = config.beta(batch_index)
    kl_scale = (1.0 / batch) if config.kl_scale is None else config.kl_scale

    nll = None
    kl = None
    last_logits = None
    for _ in range(config.n_draws):
        if config.kl_mode == "closed_form":
            logits = model(inputs, rng, mode="local")
        else:
            logits, kl_draw = _forward_sampled_with_kl(model, inputs, rng, prior)
            kl = kl_draw if kl is None else T.add(kl, kl_draw)
        ce = T.softmax_cross_entropy(logits, labels)
        nll = ce if nll is None else T.add(nll, ce)
        last_logits = logits
    nll = T.scale(nll, 1.0 / config.n_draws)
    if config.kl_mode == "closed_form":
        kl = model.kl(prior)
    else:
        kl = T.scale(kl, 1.0 / config.n_draws)

    loss = T.add(T.scale(kl, beta * kl_scale), nll)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss")
    diagnostics = {"kl_term": float(kl.data), "nll_term": float(nll.data), "beta": beta,
                   "logits": last_logits.data}
    return loss, diagnostics
