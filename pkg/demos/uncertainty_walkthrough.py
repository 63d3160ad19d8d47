"""Train a small Bayesian conv net on synthetic bar images and watch the
predictive uncertainty split into its aleatoric and epistemic parts.

Run with ``python3 demos/uncertainty_walkthrough.py``; it finishes in a few
seconds on one CPU.
"""
import numpy as np

from bayescnn import training
from bayescnn.data import LabeledDataset
from bayescnn.layers import BayesianConv2d, BayesianLinear, Flatten, Softplus
from bayescnn.model import Sequential
from bayescnn.tensor import SeededRng
from bayescnn.uncertainty import dataset_uncertainty, decompose_uncertainty, predictive_samples


def bar_images(n_per_class, seed):
    """Class c is a bright horizontal bar at row 5 + 2c on a noisy 32x32 canvas."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(10):
        for _ in range(n_per_class):
            img = rng.uniform(0.0, 0.15, size=(32, 32))
            img[5 + 2 * c:7 + 2 * c, 6:26] = 0.9
            images.append(img)
            labels.append(c)
    return LabeledDataset(np.asarray(images)[:, None] - 0.5, labels)


def small_net(seed):
    rng = SeededRng(seed)
    return Sequential([BayesianConv2d(1, 4, 5, stride=4, rng=rng, rho_init=-5.0),
                       Softplus(), Flatten(),
                       BayesianLinear(196, 10, rng=rng, rho_init=-5.0)], name="demo")


def main():
    train, test = bar_images(60, seed=0), bar_images(10, seed=1)
    model = small_net(seed=0)
    config = training.TrainingConfig(learning_rate=0.01, batch_size=32, eval_draws=10,
                                     rho_init=-5.0)

    print("epoch  val_acc  mean aleatoric  mean epistemic")
    for epoch in range(1, 6):
        training.fit(model, config, train, test, epochs=1, start_epoch=epoch - 1)
        acc, _ = training.evaluate(model, test, 10, training.eval_rng(0))
        ale, epi = dataset_uncertainty(model, test, 25, SeededRng(1))
        print(f"{epoch:5d}  {acc:7.3f}  {ale:14.5f}  {epi:14.3e}")

    # A single input in detail: the two matrices add up to the covariance of
    # the mean prediction.
    probs = predictive_samples(model, test.images[0], 25, SeededRng(2))
    summary = decompose_uncertainty(probs)
    p = summary.mean_probs
    print("\nfirst test input, label", test.labels[0])
    print("mean prediction  ", np.round(p, 3))
    print("aleatoric trace  ", round(summary.aleatoric_trace, 6))
    print("epistemic trace  ", f"{summary.epistemic_trace:.3e}")
    print("sum matches diag(p) - p p^T:",
          np.allclose(summary.total, np.diag(p) - np.outer(p, p), rtol=0, atol=1e-12))

    # A blank canvas is outside the training distribution; expect a flatter
    # prediction and a larger aleatoric trace.
    blank = np.full((1, 32, 32), -0.45)
    odd = decompose_uncertainty(predictive_samples(model, blank, 25, SeededRng(3)))
    print("\nblank input: aleatoric", round(odd.aleatoric_trace, 4),
          "epistemic", f"{odd.epistemic_trace:.3e}")


if __name__ == "__main__":
    main()
