"""Prune the smallest posterior means of a trained Bayesian net, then
fine-tune the survivors and compare accuracy at several sparsity levels.

Run with ``python3 demos/pruning_walkthrough.py`` after the uncertainty demo;
it reuses that demo's data and network.
"""
import copy

from bayescnn import pruning, training

from uncertainty_walkthrough import bar_images, small_net


def main():
    train, test = bar_images(60, seed=0), bar_images(10, seed=1)
    config = training.TrainingConfig(learning_rate=0.01, batch_size=32, eval_draws=10,
                                     rho_init=-5.0)
    model = training.fit(small_net(seed=0), config, train, test, epochs=4).model
    base, _ = training.evaluate(model, test, 10, training.eval_rng(0))
    print(f"unpruned accuracy {base:.3f}, L1 of means {pruning.l1_norm(model):.2f}\n")

    print("target  tau       sparsity  acc(pruned)  acc(+1 epoch)")
    for target in (0.25, 0.5, 0.75, 0.9, 0.97, 0.99):
        tau = pruning.threshold_for_sparsity(model, target)
        pruned, masks, report = pruning.prune_threshold(model, tau)
        acc, _ = training.evaluate(pruned, test, 10, training.eval_rng(0))
        tuned = pruning.fine_tune(copy.deepcopy(pruned), masks, train, 1, config)
        acc_tuned, _ = training.evaluate(tuned, test, 10, training.eval_rng(0))
        print(f"{target:6.2f}  {tau:.2e}  {report.sparsity:8.3f}  {acc:11.3f}  {acc_tuned:13.3f}")

    print("\nper-layer view at 50%:")
    _, _, report = pruning.prune_threshold(model, pruning.threshold_for_sparsity(model, 0.5))
    for name, kept, total, sparsity in report.rows():
        print(f"  {name:7s} kept {kept:5d} of {total:5d}  (sparsity {sparsity:.3f})")


if __name__ == "__main__":
    main()
