"""Predictive sampling and the aleatoric / epistemic variance split.

For ``T`` softmax outputs ``p_t`` of independent posterior draws, with
``p_bar`` their mean::

    aleatoric = mean_t [diag(p_t) - p_t p_t^T]
    epistemic = mean_t [(p_t - p_bar)(p_t - p_bar)^T]

Their sum equals ``diag(p_bar) - p_bar p_bar^T``, the covariance of the one-hot
predictive distribution. Scalar summaries are matrix traces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import Sequential
from .tensor import NumericError, SeededRng

DEFAULT_T = 25
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class PredictiveSummary:
    mean_probs: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray

    @property
    def aleatoric_trace(self) -> float:
        return float(np.trace(self.aleatoric))

    @property
    def epistemic_trace(self) -> float:
        return float(np.trace(self.epistemic))

    @property
    def total_trace(self) -> float:
        return float(np.trace(self.total))


def predictive_samples(model: Sequential, inputs, T_draws: int, rng: SeededRng,
                       mode: str = "sample") -> np.ndarray:
    """Softmax outputs of ``T_draws`` posterior draws.

    A single input (C, H, W) gives a (T, classes) array; a batch (N, C, H, W)
    gives (T, N, classes). In ``"sample"`` mode each draw samples every weight
    once and applies it to the whole batch.
    """
    if T_draws < 1:
        raise ValueError("T must be >= 1")
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = []
    with T.no_grad():
        for _ in range(T_draws):
            logits = model(x, rng, mode=mode if model.is_bayesian else "mean").data
            if not np.all(np.isfinite(logits)):
                raise NumericError("non-finite logits")
            out.append(T.softmax(logits))
    probs = np.stack(out)
    return probs[:, 0] if single else probs


def _check_simplex(samples: np.ndarray):
    if samples.ndim < 2 or samples.shape[0] < 1:
        raise ValueError("need at least one probability vector")
    if np.any(samples < -SIMPLEX_TOL) or np.any(samples > 1 + SIMPLEX_TOL) \
            or np.any(np.abs(samples.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("samples are not probability vectors")


def decompose_uncertainty(samples) -> PredictiveSummary:
    """Split the predictive covariance of (T, C) samples into its two parts."""
    p = np.asarray(samples, dtype=np.float64)
    _check_simplex(p)
    n = p.shape[0]
    p_bar = p.mean(axis=0)
    aleatoric = np.diag(p_bar) - p.T @ p / n
    dev = p - p_bar
    epistemic = dev.T @ dev / n
    return PredictiveSummary(p_bar, aleatoric, epistemic, aleatoric + epistemic)


def uncertainty_traces(samples) -> tuple:
    """Per-input (aleatoric, epistemic) traces for (T, N, C) samples."""
    p = np.asarray(samples, dtype=np.float64)
    _check_simplex(p)
    aleatoric = np.mean(np.sum(p - p * p, axis=-1), axis=0)
    epistemic = np.mean(np.sum((p - p.mean(axis=0)) ** 2, axis=-1), axis=0)
    return aleatoric, epistemic


def dataset_uncertainty(model: Sequential, dataset, T_draws: int = DEFAULT_T,
                        rng: SeededRng | None = None, batch_size: int = 500) -> tuple:
    """Mean aleatoric and epistemic traces over every input of ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = rng or SeededRng(0)
    ale, epi = [], []
    for start in range(0, len(dataset), batch_size):
        probs = predictive_samples(model, dataset.images[start:start + batch_size], T_draws, rng)
        a, e = uncertainty_traces(probs)
        ale.append(a)
        epi.append(e)
    return float(np.concatenate(ale).mean()), float(np.concatenate(epi).mean())
