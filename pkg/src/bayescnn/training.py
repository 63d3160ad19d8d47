"""Adam, the epoch loop, evaluation, metrics CSV and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import zoo
from .data import BatchIterator, LabeledDataset
from .layers import BayesianLayer, PriorSpec
from .model import Sequential
from .objective import ElboConfig, negative_elbo
from .tensor import NumericError, SeededRng
from .uncertainty import predictive_samples

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "kl", "nll", "train_acc", "val_acc",
                  "mean_sigma_l1", "tracked_sigma", "seconds")
CHECKPOINT_MAGIC = "BAYESCNN-CHECKPOINT"
CHECKPOINT_VERSION = 1
# rng stream key, derived from the run seed, used for every evaluation
EVAL_STREAM = 1_000_003


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    learning_rate: float = 0.001
    epochs: int = 10
    batch_size: int = 256
    train_draws: int = 1
    eval_draws: int = 25
    l2_lambda: float = 0.0005
    seed: int = 0
    sigma_p: float = 1.0
    kl_mode: str = "closed_form"
    kl_weight_scheme: str = "blundell"
    rho_init: float = -10.0
    mu_init_std: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stopping: bool = False
    patience: int = 5
    eval_batch_size: int = 1000

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "train_draws", "eval_draws",
                     "sigma_p", "patience", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")

    @property
    def prior(self) -> PriorSpec:
        return PriorSpec(self.sigma_p)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    kl: float
    nll: float
    train_acc: float
    val_acc: float
    mean_sigma: dict = field(default_factory=dict)
    tracked_sigma: float = float("nan")
    wall_time: float = 0.0

    @property
    def mean_sigma_l1(self) -> float:
        return next(iter(self.mean_sigma.values()), float("nan"))

    def row(self) -> list:
        return [str(self.epoch), repr(self.train_loss), repr(self.kl), repr(self.nll),
                repr(self.train_acc), repr(self.val_acc), repr(self.mean_sigma_l1),
                repr(self.tracked_sigma), f"{self.wall_time:.3f}"]


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in metrics:
            writer.writerow(m.row())


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- Adam ---------------------------------------------------------------------


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """Bias-corrected Adam update.

    ``params`` and ``grads`` are sequences of arrays; ``moments`` is a pair of
    lists ``(m, v)``. Returns the updated ``(params, (m, v))`` as new arrays.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m_list, v_list = moments
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, m_list, v_list):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise T.DimensionError(f"adam: shapes {p.shape}, {g.shape}, {m.shape}, {v.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, (new_m, new_v)


class Adam:
    """Holds Adam moments for a model's named parameters."""

    def __init__(self, named_params: dict, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in named_params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in named_params.items()}
        self.t = 0

    def step(self, named_params: dict, grads: dict):
        self.t += 1
        names = self.names
        new_p, (m, v) = adam_step([named_params[k].data for k in names], [grads[k] for k in names],
                                  ([self.m[k] for k in names], [self.v[k] for k in names]),
                                  self.lr, self.beta1, self.beta2, self.eps, self.t)
        for k, p, mk, vk in zip(names, new_p, m, v):
            named_params[k].data = p
            self.m[k], self.v[k] = mk, vk

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


# --- evaluation ---------------------------------------------------------------


def eval_rng(seed: int) -> SeededRng:
    return SeededRng(seed).spawn(EVAL_STREAM)


def evaluate(model: Sequential, dataset: LabeledDataset, T_draws: int = 25,
             rng: SeededRng | None = None, batch_size: int = 1000) -> tuple:
    """Accuracy and mean NLL of the ``T_draws``-sample predictive mean."""
    if T_draws < 1:
        raise ValueError("T must be >= 1")
    rng = rng or eval_rng(0)
    draws = T_draws if model.is_bayesian else 1
    correct, nll = 0, 0.0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        p = predictive_samples(model, x, draws, rng).mean(axis=0)
        correct += int(np.sum(p.argmax(axis=1) == y))
        nll -= float(np.sum(np.log(np.maximum(p[np.arange(len(y)), y], 1e-300))))
    n = len(dataset)
    return correct / n, nll / n


# --- training loop --------------------------------------------------------------


def _sigma_stats(model: Sequential) -> tuple:
    stats = {}
    tracked = float("nan")
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BayesianLayer):
            sig = layer.params.sigma_values()
            if layer.params.mask is not None:
                sig = sig[layer.params.mask]
            stats[f"layer{i}"] = float(sig.mean()) if sig.size else float("nan")
            if np.isnan(tracked):
                tracked = float(layer.params.sigma_values().flat[0])
    return stats, tracked


def _mu_keys(model: Sequential) -> set:
    """Parameter names that receive the L2 penalty (means and point weights)."""
    return {k for k in model.named_parameters() if k.endswith(".mu") or k.endswith(".weight")}


def _param_masks(model: Sequential) -> dict:
    out = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BayesianLayer) and layer.params.mask is not None:
            out[f"layer{i}.mu"] = layer.params.mask
            out[f"layer{i}.rho"] = layer.params.mask
    return out


def enforce_masks(model: Sequential):
    for layer in model.bayesian_layers():
        if layer.params.mask is not None:
            layer.params.mu.data = np.where(layer.params.mask, layer.params.mu.data, 0.0)


@dataclass
class TrainResult:
    model: Sequential
    metrics: list
    checkpoints: list
    optimizer: Adam


def fit(model: Sequential, config: TrainingConfig, train_set: LabeledDataset,
        val_set: LabeledDataset | None = None, epochs: int | None = None,
        out_dir=None, optimizer: Adam | None = None, start_epoch: int = 0,
        on_epoch=None, metrics_name: str = "metrics.csv") -> TrainResult:
    """Run ``epochs`` epochs of minibatch training on an existing model.

    Masked (pruned) weights of Bayesian layers receive no update and stay
    exactly zero. ``on_epoch(model, metrics)`` is called after each epoch.
    """
    epochs = config.epochs if epochs is None else epochs
    named = model.named_parameters()
    optimizer = optimizer or Adam(named, config.learning_rate, config.beta1, config.beta2,
                                  config.eps)
    prior = config.prior
    mu_keys = _mu_keys(model)
    masks = _param_masks(model)
    rng = SeededRng(config.seed)
    metrics, checkpoints = [], []
    best_acc, stale = -1.0, 0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    enforce_masks(model)

    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        t0 = time.perf_counter()
        batches = BatchIterator(train_set, config.batch_size, config.seed, epoch)
        elbo = ElboConfig(n_draws=config.train_draws, kl_mode=config.kl_mode,
                          kl_weight_scheme=config.kl_weight_scheme, M=len(batches))
        step_rng = rng.spawn(epoch)
        tot_loss = tot_kl = tot_nll = 0.0
        correct = seen = 0
        for i, (x, y) in enumerate(batches, start=1):
            if model.is_bayesian:
                loss, diag = negative_elbo(model, x, y, elbo, prior, i, step_rng)
                logits = diag["logits"]
                tot_kl += diag["kl_term"]
                tot_nll += diag["nll_term"] * len(y)
            else:
                out = model(x, step_rng)
                loss = T.softmax_cross_entropy(out, y)
                logits = out.data
                tot_nll += float(loss.data) * len(y)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {i}")
            grads = T.gradient_of(loss, list(named.values()))
            grads = dict(zip(named, grads))
            if config.l2_lambda:
                for k in mu_keys:
                    grads[k] = grads[k] + config.l2_lambda * named[k].data
            for k, mask in masks.items():
                grads[k] = np.where(mask, grads[k], 0.0)
            frozen = {k: named[k].data.copy() for k in masks}
            optimizer.step(named, grads)
            for k, mask in masks.items():
                named[k].data = np.where(mask, named[k].data, frozen[k])
            enforce_masks(model)
            tot_loss += float(loss.data) * len(y)
            correct += int(np.sum(logits.argmax(axis=1) == y))
            seen += len(y)

        n_batches = len(batches)
        val_acc = float("nan")
        if val_set is not None:
            val_acc, _ = evaluate(model, val_set, config.eval_draws, eval_rng(config.seed),
                                  config.eval_batch_size)
        sigma, tracked = _sigma_stats(model)
        row = EpochMetrics(epoch, tot_loss / seen, tot_kl / n_batches, tot_nll / seen,
                           correct / seen, val_acc, sigma, tracked, time.perf_counter() - t0)
        metrics.append(row)
        log.info("epoch %d loss %.4f nll %.4f train_acc %.4f val_acc %.4f "
                 "sigma_l1 %.3e tracked %.3e (%.1fs)",
                 epoch, row.train_loss, row.nll, row.train_acc, row.val_acc,
                 row.mean_sigma_l1, row.tracked_sigma, row.wall_time)
        if out_dir:
            path = os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.npz")
            save_checkpoint(path, model, optimizer, epoch, config, rng=step_rng)
            checkpoints.append(path)
            write_metrics_csv(os.path.join(out_dir, metrics_name), metrics)
        if on_epoch is not None:
            on_epoch(model, row)
        if config.early_stopping and val_set is not None:
            if val_acc > best_acc:
                best_acc, stale = val_acc, 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stopping after epoch %d", epoch)
                    break
    return TrainResult(model, metrics, checkpoints, optimizer)


def build_model(architecture: str, config: TrainingConfig, in_channels=None,
                num_classes=10) -> Sequential:
    return zoo.build(architecture, in_channels=in_channels, num_classes=num_classes,
                     seed=config.seed,
                     rho_init=config.rho_init, mu_std=config.mu_init_std)


def train(config: TrainingConfig, architecture: str, dataset: LabeledDataset,
          val_dataset: LabeledDataset | None = None, out_dir=None, on_epoch=None) -> TrainResult:
    """Build ``architecture`` and train it from scratch."""
    in_channels = dataset.images.shape[1]
    model = build_model(architecture, config, in_channels, dataset.num_classes)
    try:
        return fit(model, config, dataset, val_dataset, out_dir=out_dir, on_epoch=on_epoch)
    except (NumericError, TrainingDiverged) as exc:
        if out_dir:
            dump = {"error": str(exc), "config": config.to_dict(),
                    "sigma": _sigma_stats(model)[0]}
            with open(os.path.join(out_dir, "divergence.json"), "w") as fh:
                json.dump(dump, fh, indent=2)
        raise TrainingDiverged(f"training aborted: {exc}") from exc


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, model: Sequential, optimizer: Adam | None = None, epoch: int = 0,
                    config: TrainingConfig | None = None, rng: SeededRng | None = None):
    """Write a versioned ``.npz`` container with parameters, masks and Adam state."""
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "architecture": model.name,
        "input_shape": list(model.input_shape) if model.input_shape else None,
        "num_classes": _num_classes(model),
        "epoch": epoch,
        "adam_t": optimizer.t if optimizer else 0,
        "config": config.to_dict() if config else None,
        "rng_state": rng.get_state() if rng else None,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, v in model.state_dict().items():
        arrays[f"param/{k}"] = v
    for k, mask in model.masks().items():
        arrays[f"mask/{k}"] = mask
    if optimizer is not None:
        for k in optimizer.names:
            arrays[f"adam_m/{k}"] = optimizer.m[k]
            arrays[f"adam_v/{k}"] = optimizer.v[k]
    tmp = str(path) + ".tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _num_classes(model: Sequential) -> int:
    last = model.weight_layers()[-1]
    return last.out_features


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple:
    """Return ``(model, meta, optimizer)`` reconstructed from ``path``."""
    with np.load(path) as z:
        if "__meta__" not in z.files:
            raise CheckpointError(f"{path}: not a checkpoint container")
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {meta.get('magic')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {meta.get('version')}")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        masks = {k[len("mask/"):]: z[k].astype(bool) for k in z.files if k.startswith("mask/")}
        m = {k[len("adam_m/"):]: z[k] for k in z.files if k.startswith("adam_m/")}
        v = {k[len("adam_v/"):]: z[k] for k in z.files if k.startswith("adam_v/")}
    in_channels = meta["input_shape"][0] if meta["input_shape"] else None
    model = zoo.build(meta["architecture"], in_channels=in_channels,
                      num_classes=meta["num_classes"])
    model.load_state_dict(params)
    for key, mask in masks.items():
        model.layers[int(key[len("layer"):])].params.mask = mask
    optimizer = None
    if m:
        cfg = meta.get("config") or {}
        optimizer = Adam(model.named_parameters(), cfg.get("learning_rate", 0.001),
                         cfg.get("beta1", 0.9), cfg.get("beta2", 0.999), cfg.get("eps", 1e-8))
        optimizer.m, optimizer.v, optimizer.t = m, v, meta["adam_t"]
    return model, meta, optimizer
