import numpy as np
import pytest

from bayescnn import data


def synthetic_digits(n_per_class, seed):
    """28x28 uint8 images where class c is a bright bar at a class-specific
    row and column, plus speckle noise."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for c in range(10):
        for _ in range(n_per_class):
            img = rng.integers(0, 40, size=(28, 28))
            r = 3 + 2 * c + int(rng.integers(0, 2))
            img[r:r + 2, 4:24] = 220
            img[4:24, 3 + 2 * c:5 + 2 * c] = 180
            images.append(img)
            labels.append(c)
    order = rng.permutation(len(labels))
    return np.asarray(images, dtype=np.uint8)[order], np.asarray(labels)[order]


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """A directory laid out like the MNIST distribution, with synthetic content."""
    root = tmp_path_factory.mktemp("mnist")
    for split, stem, n, seed in (("train", "train", 20, 0), ("test", "t10k", 8, 1)):
        imgs, labels = synthetic_digits(n, seed)
        data.write_mnist_idx(root / f"{stem}-images-idx3-ubyte", root / f"{stem}-labels-idx1-ubyte",
                             imgs, labels)
    return root


@pytest.fixture(scope="session")
def small_mnist(mnist_dir):
    return data.load_mnist(mnist_dir, "train"), data.load_mnist(mnist_dir, "test")
