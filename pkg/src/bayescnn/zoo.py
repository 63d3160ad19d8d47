"""LeNet-5, AlexNet and AlexNetHalf in Bayesian and frequentist form.

Each architecture is a list of layer rows giving kernel, width, stride,
padding and nonlinearity. A row also keeps the published input-shape cell
(``table_input``) so tests can compare it against the computed chain.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import layers as L
from .model import Sequential
from .tensor import SeededRng

ARCHITECTURES = ("lenet5", "alexnet", "alexnet-half")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "pool" or "fc"
    width: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int = 0
    nonlinearity: str | None = None  # "softplus" or None
    table_input: tuple | None = None  # printed cell without the batch axis


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple
    in_channels: int
    num_classes: int
    input_hw: int = 32
    bayesian: bool = True

    def shape_chain(self) -> list:
        """Input shape (without batch axis) seen by every row of the table."""
        c, h, w = self.in_channels, self.input_hw, self.input_hw
        shapes = []
        flat = None
        for row in self.layers:
            if row.kind == "conv":
                shapes.append((c, h, w))
                h = (h + 2 * row.padding - row.kernel) // row.stride + 1
                w = (w + 2 * row.padding - row.kernel) // row.stride + 1
                c = row.width
            elif row.kind == "pool":
                shapes.append((c, h, w))
                h, w = h // row.stride, w // row.stride
            else:
                flat = c * h * w if flat is None else flat
                shapes.append((flat,))
                flat = row.width
        return shapes


def _lenet5_rows(num_classes):
    return (
        LayerSpec("conv", 6, 5, 1, 0, "softplus", (1, 32, 32)),
        LayerSpec("pool", None, 2, 2, 0, None, (6, 28, 28)),
        # the printed cell reads 1x14x14; the pooled tensor has 6 channels
        LayerSpec("conv", 16, 5, 1, 0, "softplus", (1, 14, 14)),
        LayerSpec("pool", None, 2, 2, 0, None, (16, 10, 10)),
        LayerSpec("fc", 120, nonlinearity="softplus", table_input=(400,)),
        LayerSpec("fc", 84, nonlinearity="softplus", table_input=(120,)),
        LayerSpec("fc", num_classes, table_input=(84,)),
    )


def _alexnet_rows(widths, fc_in, num_classes):
    c1, c2, c3, c4, c5 = widths
    return (
        LayerSpec("conv", c1, 11, 4, 5, "softplus", (3, 32, 32)),
        LayerSpec("pool", None, 2, 2, 0, None, (c1, 32, 32)),
        LayerSpec("conv", c2, 5, 1, 2, "softplus", (c1, 15, 15)),
        LayerSpec("pool", None, 2, 2, 0, None, (c2, 15, 15)),
        LayerSpec("conv", c3, 3, 1, 1, "softplus", (c2, 7, 7)),
        LayerSpec("conv", c4, 3, 1, 1, "softplus", (c3, 7, 7)),
        LayerSpec("conv", c5, 3, 1, 1, "softplus", (c4, 7, 7)),
        LayerSpec("pool", None, 2, 2, 0, None, (c5, 7, 7)),
        LayerSpec("fc", num_classes, table_input=(fc_in,)),
    )


def lenet5_spec(bayesian=True, in_channels=1, num_classes=10) -> ArchitectureSpec:
    return ArchitectureSpec("lenet5", _lenet5_rows(num_classes), in_channels, num_classes,
                            bayesian=bayesian)


def alexnet_spec(bayesian=True, in_channels=3, num_classes=10) -> ArchitectureSpec:
    return ArchitectureSpec("alexnet", _alexnet_rows((64, 192, 384, 256, 128), 128, num_classes),
                            in_channels, num_classes, bayesian=bayesian)


def alexnet_half_spec(bayesian=True, in_channels=3, num_classes=10) -> ArchitectureSpec:
    return ArchitectureSpec("alexnet-half", _alexnet_rows((32, 96, 192, 128, 64), 64, num_classes),
                            in_channels, num_classes, bayesian=bayesian)


def build_from_spec(spec: ArchitectureSpec, seed: int = 0, rho_init: float = L.RHO_INIT,
                    mu_std: float = L.MU_INIT_STD) -> Sequential:
    rng = SeededRng(seed)
    chain = spec.shape_chain()
    layers = []
    flattened = False
    for row, shape in zip(spec.layers, chain):
        tag = f"layer{len(layers)}"
        if row.kind == "conv":
            c_in = shape[0]
            if spec.bayesian:
                layer = L.BayesianConv2d(c_in, row.width, row.kernel, row.stride, row.padding,
                                         rng=rng, rho_init=rho_init, mu_std=mu_std, name=tag)
            else:
                layer = L.Conv2d(c_in, row.width, row.kernel, row.stride, row.padding,
                                 rng=rng, init_std=mu_std, name=tag)
            layers.append(layer)
        elif row.kind == "pool":
            layers.append(L.MaxPool2d(row.kernel, row.stride))
        else:
            if not flattened:
                layers.append(L.Flatten())
                flattened = True
            if spec.bayesian:
                layer = L.BayesianLinear(shape[0], row.width, rng=rng, rho_init=rho_init,
                                         mu_std=mu_std, name=tag)
            else:
                layer = L.Linear(shape[0], row.width, rng=rng, init_std=mu_std, name=tag)
            layers.append(layer)
        if row.nonlinearity == "softplus":
            layers.append(L.Softplus())
    suffix = "bayes" if spec.bayesian else "freq"
    return Sequential(layers, name=f"{spec.name}-{suffix}",
                      input_shape=(spec.in_channels, spec.input_hw, spec.input_hw))


def build_lenet5(bayesian=True, in_channels=1, num_classes=10, **kw) -> Sequential:
    return build_from_spec(lenet5_spec(bayesian, in_channels, num_classes), **kw)


def build_alexnet(bayesian=True, in_channels=3, num_classes=10, **kw) -> Sequential:
    return build_from_spec(alexnet_spec(bayesian, in_channels, num_classes), **kw)


def build_alexnet_half(bayesian=True, in_channels=3, num_classes=10, **kw) -> Sequential:
    return build_from_spec(alexnet_half_spec(bayesian, in_channels, num_classes), **kw)


def parse_arch(name: str) -> tuple:
    """``"lenet5-bayes"`` -> ``("lenet5", True)``."""
    base, _, kind = name.rpartition("-")
    if base not in ARCHITECTURES or kind not in ("bayes", "freq"):
        valid = ", ".join(f"{a}-{k}" for a in ARCHITECTURES for k in ("bayes", "freq"))
        raise ValueError(f"unknown architecture {name!r}; expected one of {valid}")
    return base, kind == "bayes"


_SPECS = {"lenet5": lenet5_spec, "alexnet": alexnet_spec, "alexnet-half": alexnet_half_spec}


def architecture_spec(name: str, in_channels=None, num_classes=10) -> ArchitectureSpec:
    base, bayesian = parse_arch(name)
    if in_channels is None:
        in_channels = 1 if base == "lenet5" else 3
    return _SPECS[base](bayesian, in_channels, num_classes)


def build(name: str, in_channels=None, num_classes=10, **kw) -> Sequential:
    """Build a model from a CLI-style name such as ``alexnet-half-freq``."""
    model = build_from_spec(architecture_spec(name, in_channels, num_classes), **kw)
    model.name = name
    return model
