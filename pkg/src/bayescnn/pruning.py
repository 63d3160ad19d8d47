"""Magnitude pruning of posterior means, L1 reporting and masked fine-tuning."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass

import numpy as np

from .layers import BayesianLayer
from .model import Sequential
from .training import fit

REPORT_HEADER = ("layer", "retained", "total", "sparsity")


@dataclass(frozen=True)
class SparsityReport:
    layers: tuple  # (name, retained, total) per Bayesian layer
    l1_before: float
    l1_after: float

    @property
    def retained(self) -> int:
        return sum(r for _, r, _ in self.layers)

    @property
    def total(self) -> int:
        return sum(t for _, _, t in self.layers)

    @property
    def sparsity(self) -> float:
        return 1.0 - self.retained / self.total if self.total else 0.0

    def rows(self) -> list:
        out = [(name, r, t, 1.0 - r / t) for name, r, t in self.layers]
        out.append(("global", self.retained, self.total, self.sparsity))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_HEADER)
            for name, r, t, s in self.rows():
                writer.writerow([name, r, t, repr(s)])


def _named_bayesian(model: Sequential) -> list:
    return [(f"layer{i}", l) for i, l in enumerate(model.layers) if isinstance(l, BayesianLayer)]


def _effective_abs_mu(layer: BayesianLayer) -> np.ndarray:
    mu = np.abs(layer.params.mu.data)
    if layer.params.mask is not None:
        mu = np.where(layer.params.mask, mu, 0.0)
    return mu


def l1_norm(model: Sequential) -> float:
    """Sum of ``|mu|`` over all Bayesian layers (pruned weights count as 0)."""
    return float(sum(_effective_abs_mu(l).sum() for _, l in _named_bayesian(model)))


def threshold_for_sparsity(model: Sequential, target_sparsity: float) -> float:
    """Smallest ``tau`` such that pruning ``|mu| <= tau`` reaches ``target_sparsity``."""
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError("target sparsity must lie in [0, 1)")
    values = np.sort(np.concatenate([_effective_abs_mu(l).ravel()
                                     for _, l in _named_bayesian(model)]))
    k = math.ceil(target_sparsity * values.size)
    return 0.0 if k == 0 else float(values[k - 1])


def prune_threshold(model: Sequential, tau: float, inplace: bool = False) -> tuple:
    """Remove every weight with ``|mu| <= tau``.

    Returns ``(pruned_model, masks, report)`` where ``masks`` maps layer names
    to boolean arrays (True = kept). The pruned weights get ``mu = 0`` and are
    excluded from the activation variance and the KL term.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    before = l1_norm(model)
    pruned = model if inplace else copy.deepcopy(model)
    masks, rows = {}, []
    for name, layer in _named_bayesian(pruned):
        keep = _effective_abs_mu(layer) > tau
        layer.params.mask = keep
        layer.params.mu.data = np.where(keep, layer.params.mu.data, 0.0)
        masks[name] = keep
        rows.append((name, int(keep.sum()), int(keep.size)))
    return pruned, masks, SparsityReport(tuple(rows), before, l1_norm(pruned))


def sparsity_report(model: Sequential) -> SparsityReport:
    rows = []
    for name, layer in _named_bayesian(model):
        mask = layer.params.mask
        kept = layer.params.mu.size if mask is None else int(mask.sum())
        rows.append((name, kept, int(layer.params.mu.size)))
    l1 = l1_norm(model)
    return SparsityReport(tuple(rows), l1, l1)


def apply_masks(model: Sequential, masks: dict):
    layers = dict(_named_bayesian(model))
    for name, mask in masks.items():
        if name not in layers:
            raise KeyError(f"{name} is not a Bayesian layer")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != layers[name].params.shape:
            raise ValueError(f"mask for {name} has shape {mask.shape}, "
                             f"layer has {layers[name].params.shape}")
        layers[name].params.mask = mask
        layers[name].params.mu.data = np.where(mask, layers[name].params.mu.data, 0.0)


def fine_tune(model: Sequential, masks: dict, dataset, epochs: int, config, val_dataset=None,
              out_dir=None, on_epoch=None):
    """Continue training only the retained weights; pruned means stay exactly 0."""
    apply_masks(model, masks)
    if epochs == 0:
        return model
    fit(model, config, dataset, val_dataset, epochs=epochs, out_dir=out_dir,
        on_epoch=on_epoch, metrics_name="finetune_metrics.csv")
    return model
