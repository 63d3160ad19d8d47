"""Sequential network container shared by Bayesian and frequentist twins."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import BayesianLayer, PriorSpec, kl_closed_form
from .tensor import SeededRng, Tensor


class Sequential:
    """Ordered stack of layers with a name for checkpointing.

    ``forward`` takes a ``mode`` that each Bayesian layer interprets:
    ``"local"`` (local reparameterization), ``"sample"`` (one weight draw per
    layer per call) or ``"mean"`` (posterior means only). Frequentist layers
    ignore it.
    """

    def __init__(self, layers, name: str = "model", input_shape=None):
        self.layers = list(layers)
        self.name = name
        self.input_shape = input_shape

    def forward(self, x, rng: SeededRng | None = None, mode: str = "local") -> Tensor:
        if mode != "mean" and self.is_bayesian and rng is None:
            raise ValueError(f"forward mode {mode!r} needs an rng")
        out = T.as_tensor(x)
        for layer in self.layers:
            out = layer(out, rng, mode)
        return out

    __call__ = forward

    @property
    def is_bayesian(self) -> bool:
        return any(layer.bayesian for layer in self.layers)

    def bayesian_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, BayesianLayer)]

    def weight_layers(self) -> list:
        return [l for l in self.layers if l.num_scalars()]

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, p in layer.named_parameters().items():
                out[f"layer{i}.{key}"] = p
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_scalars(self) -> int:
        """Count of learnable scalars (mu and rho both count for Bayesian layers)."""
        return sum(layer.num_scalars() for layer in self.layers)

    def kl(self, prior: PriorSpec) -> Tensor:
        terms = [kl_closed_form(l.params, prior) for l in self.bayesian_layers()]
        if not terms:
            return Tensor(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return total

    def mu_arrays(self) -> list:
        """Posterior means (or point weights) of every weight layer, as arrays."""
        out = []
        for layer in self.weight_layers():
            out.append(layer.params.mu.data if layer.bayesian else layer.weight.data)
        return out

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        if set(params) != set(state):
            raise KeyError(f"state keys {sorted(state)} do not match model {sorted(params)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.DimensionError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def masks(self) -> dict:
        return {f"layer{i}": l.params.mask for i, l in enumerate(self.layers)
                if isinstance(l, BayesianLayer) and l.params.mask is not None}
