import copy

import numpy as np
import pytest

from bayescnn import pruning, training, zoo
from bayescnn.layers import BayesianLinear, Flatten, MaxPool2d, BayesianConv2d
from bayescnn.model import Sequential
from bayescnn.tensor import SeededRng
from bayescnn.uncertainty import predictive_samples


def small_model(seed=0):
    rng = SeededRng(seed)
    return Sequential([BayesianConv2d(1, 3, 3, rng=rng, rho_init=-3.0), MaxPool2d(), Flatten(),
                       BayesianLinear(27, 4, rng=rng, rho_init=-3.0)], name="small")


def all_abs_mu(model):
    return np.concatenate([np.abs(l.params.mu.data).ravel() for l in model.bayesian_layers()])


class TestL1:
    def test_zero_model(self):
        m = small_model()
        for l in m.bayesian_layers():
            l.params.mu.data[:] = 0.0
        assert pruning.l1_norm(m) == 0.0

    def test_single_weight(self):
        m = Sequential([BayesianLinear(1, 1)])
        m.layers[0].params.mu.data[:] = -3.0
        assert pruning.l1_norm(m) == 3.0

    def test_matches_elementwise_scan(self):
        m = small_model(2)
        total = 0.0
        for l in m.bayesian_layers():
            for v in l.params.mu.data.ravel():
                total += abs(v)
        assert pruning.l1_norm(m) == pytest.approx(total, rel=1e-13)

    def test_ignores_sigma(self):
        m = small_model()
        before = pruning.l1_norm(m)
        for l in m.bayesian_layers():
            l.params.rho.data[:] = 5.0
        assert pruning.l1_norm(m) == before


class TestThresholdForSparsity:
    def _values_model(self, values):
        m = Sequential([BayesianLinear(len(values), 1)])
        m.layers[0].params.mu.data[0] = values
        return m

    def test_zero_target(self):
        assert pruning.threshold_for_sparsity(small_model(), 0.0) == 0.0

    def test_quantile_oracle(self):
        assert pruning.threshold_for_sparsity(self._values_model([1.0, 2.0, 3.0, 4.0]), 0.5) == 2.0
        assert pruning.threshold_for_sparsity(self._values_model([-4.0, 3.0, -1.0, 2.0]), 0.5) == 2.0

    def test_monotone(self):
        m = small_model(4)
        taus = [pruning.threshold_for_sparsity(m, t) for t in np.linspace(0, 0.99, 40)]
        assert all(a <= b for a, b in zip(taus, taus[1:]))

    def test_reaches_target(self):
        m = small_model(5)
        for target in (0.1, 0.37, 0.5, 0.9):
            tau = pruning.threshold_for_sparsity(m, target)
            assert pruning.prune_threshold(m, tau)[2].sparsity >= target

    def test_rejects_bad_target(self):
        for bad in (-0.1, 1.0):
            with pytest.raises(ValueError):
                pruning.threshold_for_sparsity(small_model(), bad)


class TestPruneThreshold:
    def test_tau_zero_prunes_only_exact_zeros(self):
        m = small_model()
        m.layers[0].params.mu.data[0, 0, 0, :2] = 0.0
        _, masks, report = pruning.prune_threshold(m, 0.0)
        assert report.total - report.retained == 2
        assert not masks["layer0"][0, 0, 0, :2].any()

    def test_infinite_tau(self):
        m = small_model()
        pruned, _, report = pruning.prune_threshold(m, np.inf)
        assert report.sparsity == 1.0
        x = np.random.default_rng(0).normal(size=(3, 1, 8, 8))
        np.testing.assert_array_equal(pruned(x, SeededRng(0), mode="mean").data, 0.0)
        p = predictive_samples(pruned, x, 4, SeededRng(1))
        np.testing.assert_allclose(p, 0.25, rtol=0, atol=1e-15)

    def test_median_threshold_gives_half(self):
        m = small_model(3)
        values = np.sort(all_abs_mu(m))
        tau = float(np.median(values))
        report = pruning.prune_threshold(m, tau)[2]
        expected_pruned = int(np.sum(values <= tau))
        assert report.total - report.retained == expected_pruned
        assert abs(report.sparsity - 0.5) <= 1.0 / report.total

    def test_count_oracle_and_retained_minimum(self):
        m = small_model(6)
        tau = 0.07
        pruned, masks, report = pruning.prune_threshold(m, tau)
        assert report.total - report.retained == int(np.sum(all_abs_mu(m) <= tau))
        kept = np.concatenate([np.abs(l.params.mu.data)[masks[f"layer{i}"]]
                               for i, l in enumerate(pruned.layers) if f"layer{i}" in masks])
        assert kept.min() > tau

    def test_pruned_means_zero_and_original_untouched(self):
        m = small_model()
        before = copy.deepcopy(m.state_dict())
        pruned, masks, _ = pruning.prune_threshold(m, 0.05)
        for key, arr in m.state_dict().items():
            np.testing.assert_array_equal(arr, before[key])
        for name, mask in masks.items():
            layer = pruned.layers[int(name[5:])]
            assert np.all(layer.params.mu.data[~mask] == 0.0)

    def test_l1_reported(self):
        m = small_model()
        pruned, _, report = pruning.prune_threshold(m, 0.05)
        assert report.l1_before == pytest.approx(pruning.l1_norm(m))
        assert report.l1_after == pytest.approx(pruning.l1_norm(pruned))
        assert report.l1_after < report.l1_before

    def test_negative_tau(self):
        with pytest.raises(ValueError):
            pruning.prune_threshold(small_model(), -1.0)

    def test_sparsity_csv(self, tmp_path):
        _, _, report = pruning.prune_threshold(small_model(), 0.05)
        path = tmp_path / "s.csv"
        report.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer,retained,total,sparsity"
        assert lines[-1].startswith(f"global,{report.retained},{report.total},")
        assert len(lines) == 2 + 2

    def test_sparsity_report_of_pruned_model(self):
        pruned, _, report = pruning.prune_threshold(small_model(), 0.05)
        again = pruning.sparsity_report(pruned)
        assert again.layers == report.layers
        assert again.sparsity == report.sparsity


class TestFineTune:
    def test_zero_epochs_is_identity(self, small_mnist):
        train, _ = small_mnist
        m = zoo.build("lenet5-bayes", seed=0)
        pruned, masks, _ = pruning.prune_threshold(m, pruning.threshold_for_sparsity(m, 0.5))
        before = pruned.state_dict()
        out = pruning.fine_tune(pruned, masks, train, 0, training.TrainingConfig())
        for k, v in out.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_mask_invariant_after_every_step(self, small_mnist, monkeypatch):
        train, _ = small_mnist
        m = zoo.build("lenet5-bayes", seed=1, rho_init=-5.0)
        pruned, masks, _ = pruning.prune_threshold(m, pruning.threshold_for_sparsity(m, 0.5))
        rho_before = {n: pruned.layers[int(n[5:])].params.rho.data.copy() for n in masks}
        steps = []
        original = training.enforce_masks

        def checked(model):
            original(model)
            for name, mask in masks.items():
                params = model.layers[int(name[5:])].params
                assert np.all(params.mu.data[~mask] == 0.0)
                np.testing.assert_array_equal(params.rho.data[~mask], rho_before[name][~mask])
            steps.append(1)

        monkeypatch.setattr(training, "enforce_masks", checked)
        cfg = training.TrainingConfig(batch_size=2, seed=3, rho_init=-5.0)
        pruning.fine_tune(pruned, masks, train.head(100), 2, cfg)
        assert len(steps) >= 100
        moved = [not np.array_equal(pruned.layers[int(n[5:])].params.rho.data[mk], rho_before[n][mk])
                 for n, mk in masks.items()]
        assert all(moved)

    def test_mask_shape_mismatch(self):
        m = small_model()
        with pytest.raises(ValueError):
            pruning.fine_tune(m, {"layer0": np.ones((2, 2), dtype=bool)}, None, 0, None)
        with pytest.raises(KeyError):
            pruning.fine_tune(m, {"layer1": np.ones((1,), dtype=bool)}, None, 0, None)
