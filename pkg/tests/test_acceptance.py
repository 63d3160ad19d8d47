"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS`` or ``FAIL`` line before asserting. The
MNIST criteria (4, 5, 6, 8) share one desk-scale training run of the Bayesian
LeNet-5 and its frequentist twin. MNIST is read from ``$BAYESCNN_MNIST_DIR``
(default ``/root/data/mnist``). Set ``$BAYESCNN_ACCEPTANCE_DIR`` to keep the run
on disk; a finished run found there is reused instead of retrained.
"""
import json
import math
import os
import time

import numpy as np
import pytest

from bayescnn import data, pruning, training, zoo
from bayescnn import layers as L
from bayescnn import tensor as T
from bayescnn.layers import (PriorSpec, forward_local_reparam,
                             forward_weight_sampling, kl_closed_form, kl_monte_carlo_samples)
from bayescnn.objective import ElboConfig, negative_elbo
from bayescnn.tensor import SeededRng, gradient_of
from bayescnn.uncertainty import decompose_uncertainty, predictive_samples
from oracles import central_differences, conv2d_loops, max_rel_error
from test_data import IMAGES_IDX, LABELS_IDX, _expected_pixels
from test_layers import conv_layer, param_set
from test_objective import tiny_batch, tiny_net

MNIST_DIR = os.environ.get("BAYESCNN_MNIST_DIR", "/root/data/mnist")
EPOCHS = 10
N_UNCERTAINTY = 1000
T_DRAWS = 25


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line to the terminal, then assert."""
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}",
                  flush=True)
        assert ok, detail
    return report


def _has_mnist():
    try:
        data.find_mnist(MNIST_DIR, "train")
        data.find_mnist(MNIST_DIR, "test")
    except (FileNotFoundError, OSError):
        return False
    return True


needs_mnist = pytest.mark.skipif(not _has_mnist(), reason=f"MNIST not found in {MNIST_DIR}")


def _desk_config():
    return training.TrainingConfig(learning_rate=0.001, epochs=EPOCHS, batch_size=256,
                                   train_draws=1, eval_draws=T_DRAWS, seed=0)


def _finished(out_dir, config):
    meta = os.path.join(out_dir, "run.json")
    if not os.path.exists(meta):
        return False
    with open(meta) as fh:
        saved = json.load(fh)
    return saved["config"] == config.to_dict() and os.path.exists(
        os.path.join(out_dir, f"checkpoint_epoch{EPOCHS:03d}.npz"))


def _run(arch, root, config, train_set, val_set):
    out_dir = os.path.join(root, arch)
    if not _finished(out_dir, config):
        t0 = time.perf_counter()
        training.train(config, arch, train_set, val_set, out_dir=out_dir)
        with open(os.path.join(out_dir, "run.json"), "w") as fh:
            json.dump({"config": config.to_dict(), "seconds": time.perf_counter() - t0}, fh)
    with open(os.path.join(out_dir, "run.json")) as fh:
        seconds = json.load(fh)["seconds"]
    return {"dir": out_dir, "seconds": seconds,
            "metrics": [{k: float(v) for k, v in row.items()} for row in
                        training.read_metrics_csv(os.path.join(out_dir, "metrics.csv"))],
            "checkpoint": lambda e: os.path.join(out_dir, f"checkpoint_epoch{e:03d}.npz")}


@pytest.fixture(scope="module")
def mnist():
    return data.load_mnist(MNIST_DIR, "train"), data.load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="module")
def desk_run(mnist, tmp_path_factory):
    root = os.environ.get("BAYESCNN_ACCEPTANCE_DIR") or str(tmp_path_factory.mktemp("desk"))
    config = _desk_config()
    train_set, val_set = mnist
    return {"config": config,
            "bayes": _run("lenet5-bayes", root, config, train_set, val_set),
            "freq": _run("lenet5-freq", root, config, train_set, val_set)}


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    net = tiny_net()
    x, y = tiny_batch()
    cfg = ElboConfig(n_draws=1, kl_mode="closed_form", M=3)
    params = net.parameters()

    def loss():
        return negative_elbo(net, x, y, cfg, PriorSpec(), 1, SeededRng(7))[0]

    err = max_rel_error(gradient_of(loss(), params),
                        central_differences(lambda: loss().item(), [p.data for p in params]))
    seconds = time.perf_counter() - t0
    verdict(1, "gradient fidelity", err < 1e-4 and seconds < 60,
            f"max rel err {err:.2e} (< 1e-4), {seconds:.1f}s (< 60s)")


def test_criterion_2_kl_oracle(verdict):
    t0 = time.perf_counter()
    prior, rng = PriorSpec(1.0), SeededRng(11)
    worst = 0.0
    for mu in np.linspace(-2, 2, 5):
        for sigma in np.linspace(0.1, 2.0, 5):
            p = param_set(mu, sigma)
            draws = kl_monte_carlo_samples(p, prior, 100_000, rng)
            se = draws.std(ddof=1) / math.sqrt(draws.size)
            worst = max(worst, abs(draws.mean() - kl_closed_form(p, prior).item()) / se)
    seconds = time.perf_counter() - t0
    verdict(2, "KL oracle", worst < 3 and seconds < 60,
            f"worst deviation {worst:.2f} SE (< 3) over 25 grid points, {seconds:.1f}s")


def test_criterion_3_local_reparameterization(verdict):
    n = 100_000
    rng = np.random.default_rng(4)
    x = rng.uniform(0.2, 1.0, size=(1, 1, 4, 4))
    layer = conv_layer(rng.uniform(0.3, 0.8, size=9), rng.uniform(0.1, 0.3, size=9))
    mu, sigma = layer.params.mu.data, layer.params.sigma_values()
    want_mean = conv2d_loops(x, mu)[0]
    want_var = conv2d_loops(x ** 2, sigma ** 2)[0] + L.VARIANCE_FLOOR
    with T.no_grad():
        local = forward_local_reparam(layer, np.repeat(x, n, axis=0), SeededRng(5)).data
        draw_rng = SeededRng(6)
        sampled = np.stack([forward_weight_sampling(layer, x, draw_rng)[0].data[0]
                            for _ in range(n)])

    def rel(a, b):
        return float(np.max(np.abs(a - b) / np.abs(b)))

    errs = {"local mean": rel(local.mean(0), want_mean), "local var": rel(local.var(0), want_var),
            "sampled mean": rel(sampled.mean(0), want_mean),
            "sampled var": rel(sampled.var(0), want_var),
            "local vs sampled mean": rel(local.mean(0), sampled.mean(0)),
            "local vs sampled var": rel(local.var(0), sampled.var(0))}
    worst = max(errs.values())
    verdict(3, "local reparameterization equivalence", worst < 0.02,
            f"worst relative error {worst:.4f} (< 0.02); " +
            ", ".join(f"{k} {v:.4f}" for k, v in errs.items()))


@needs_mnist
def test_criterion_4_mnist_accuracy(verdict, desk_run):
    b = desk_run["bayes"]["metrics"][-1]["val_acc"]
    f = desk_run["freq"]["metrics"][-1]["val_acc"]
    seconds = desk_run["bayes"]["seconds"]
    verdict(4, "MNIST desk-scale accuracy", b >= 0.97 and f >= 0.97 and seconds <= 7200,
            f"Bayesian val_acc {b:.4f}, frequentist val_acc {f:.4f} (both >= 0.97); "
            f"Bayesian run {seconds / 60:.1f} min (<= 120)")


@needs_mnist
def test_criterion_5_sigma_convergence(verdict, desk_run):
    m = desk_run["bayes"]["metrics"]
    s1 = (m[0]["mean_sigma_l1"], m[EPOCHS - 1]["mean_sigma_l1"])
    tracked = (m[0]["tracked_sigma"], m[EPOCHS - 1]["tracked_sigma"])
    ok = s1[1] < s1[0] and tracked[1] < tracked[0]
    verdict(5, "sigma convergence", ok,
            f"conv1 mean sigma {s1[0]:.4e} -> {s1[1]:.4e}, "
            f"tracked sigma {tracked[0]:.4e} -> {tracked[1]:.4e} "
            f"(epoch 1 -> {EPOCHS}, both must decrease)")


def _uncertainty_scan(checkpoint, inputs, seed):
    model, _, _ = training.load_checkpoint(checkpoint)
    probs = predictive_samples(model, inputs, T_DRAWS, training.eval_rng(seed))
    traces, worst_sum, worst_eig = [], 0.0, np.inf
    for n in range(probs.shape[1]):
        s = decompose_uncertainty(probs[:, n])
        p_bar = s.mean_probs
        total = np.diag(p_bar) - np.outer(p_bar, p_bar)
        worst_sum = max(worst_sum, float(np.max(np.abs(s.aleatoric + s.epistemic - total))))
        worst_eig = min(worst_eig, float(np.linalg.eigvalsh(s.aleatoric).min()),
                        float(np.linalg.eigvalsh(s.epistemic).min()))
        traces.append(s.epistemic_trace)
    return float(np.mean(traces)), worst_sum, worst_eig


@needs_mnist
def test_criterion_6_uncertainty_behavior(verdict, desk_run, mnist):
    inputs = mnist[1].images[:N_UNCERTAINTY]
    seed = desk_run["config"].seed
    ckpt = desk_run["bayes"]["checkpoint"]
    epi1, sum1, eig1 = _uncertainty_scan(ckpt(1), inputs, seed)
    epi10, sum10, eig10 = _uncertainty_scan(ckpt(EPOCHS), inputs, seed)
    worst_sum, worst_eig = max(sum1, sum10), min(eig1, eig10)
    ok = epi10 < epi1 and worst_sum <= 1e-12 and worst_eig >= -1e-10
    verdict(6, "uncertainty behavior", ok,
            f"mean epistemic trace {epi1:.4e} -> {epi10:.4e} (must decrease); "
            f"max |ale + epi - total| {worst_sum:.1e} (<= 1e-12); "
            f"min eigenvalue {worst_eig:.1e} (>= -1e-10)")


def test_criterion_7_parameter_doubling(verdict):
    b = zoo.build_lenet5(True).num_scalars()
    f = zoo.build_lenet5(False).num_scalars()
    verdict(7, "parameter doubling", b == 2 * f, f"Bayesian {b} vs frequentist {f}")


@needs_mnist
def test_criterion_8_pruning_parity(verdict, desk_run, mnist):
    train_set, val_set = mnist
    config = desk_run["config"]
    model, _, _ = training.load_checkpoint(desk_run["bayes"]["checkpoint"](EPOCHS))
    unpruned = desk_run["bayes"]["metrics"][-1]["val_acc"]
    tau = pruning.threshold_for_sparsity(model, 0.5)
    pruned, masks, report = pruning.prune_threshold(model, tau)
    pruning.fine_tune(pruned, masks, train_set, 2, config)
    acc, _ = training.evaluate(pruned, val_set, config.eval_draws, training.eval_rng(config.seed))
    gap = 100 * abs(acc - unpruned)
    ok = report.sparsity >= 0.5 and gap <= 1.0
    verdict(8, "pruning parity", ok,
            f"sparsity {report.sparsity:.4f} (>= 0.5), unpruned {unpruned:.4f}, "
            f"pruned + 2 epochs {acc:.4f}, gap {gap:.2f} points (<= 1.0)")


def _roundtrip_model(request, tmp_path):
    """The desk-scale Bayesian checkpoint when available, else a small trained model."""
    if _has_mnist():
        run = request.getfixturevalue("desk_run")
        val_set = request.getfixturevalue("mnist")[1]
        recorded = run["bayes"]["metrics"][-1]["val_acc"]
        return run["bayes"]["checkpoint"](EPOCHS), val_set, recorded, run["config"]
    mnist_dir = request.getfixturevalue("mnist_dir")
    train_set, val_set = data.load_mnist(mnist_dir, "train"), data.load_mnist(mnist_dir, "test")
    config = training.TrainingConfig(epochs=1, batch_size=32, eval_draws=5, rho_init=-5.0)
    result = training.train(config, "lenet5-bayes", train_set, val_set, out_dir=str(tmp_path))
    return result.checkpoints[-1], val_set, result.metrics[-1].val_acc, config


def test_criterion_9_data_io(verdict, request, tmp_path):
    checks = {}
    img, lbl = tmp_path / "i-idx3-ubyte", tmp_path / "l-idx1-ubyte"
    img.write_bytes(IMAGES_IDX)
    lbl.write_bytes(LABELS_IDX)
    ds = data.load_mnist_idx(img, lbl, pad=0, center=0.0)
    checks["fixture parse"] = (np.array_equal(ds.images, _expected_pixels())
                               and ds.labels.tolist() == [7, 0, 9, 3])

    rng = np.random.default_rng(0)
    covered = True
    for _ in range(200):
        n, bs = int(rng.integers(1, 301)), int(rng.integers(1, 65))
        it = data.batches(data.LabeledDataset(np.zeros((n, 1, 1, 1)), np.zeros(n, dtype=int)),
                          bs, int(rng.integers(0, 2 ** 32)), int(rng.integers(0, 100)))
        chunks = list(it.index_batches())
        covered &= np.array_equal(np.sort(np.concatenate(chunks)), np.arange(n))
        covered &= all(len(c) == bs for c in chunks[:-1]) and 1 <= len(chunks[-1]) <= bs
    checks["batch multiset coverage"] = bool(covered)

    path, val_set, recorded, config = _roundtrip_model(request, tmp_path)
    copy_path = tmp_path / "copy.npz"
    model, meta, opt_state = training.load_checkpoint(path)
    training.save_checkpoint(copy_path, model, epoch=meta["epoch"], config=config)
    reloaded, _, _ = training.load_checkpoint(copy_path)
    acc, _ = training.evaluate(reloaded, val_set, config.eval_draws, training.eval_rng(config.seed))
    checks["checkpoint val_acc bit-identical"] = acc == recorded

    verdict(9, "data-io", all(checks.values()),
            ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items())
            + f" (val_acc {acc!r} vs recorded {recorded!r})")
