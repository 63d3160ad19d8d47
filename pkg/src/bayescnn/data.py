"""MNIST IDX and CIFAR-10 binary readers, fixture writers and batching.

Images are scaled to [0, 1] and then centred by subtracting 0.5. MNIST's
28x28 digits are zero-padded (before centring) to the 32x32 input the LeNet-5
table expects.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CENTER = 0.5

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class RecordSizeError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    name: str = ""
    split: str = ""
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise DataFormatError("non-finite pixel values")

    def __len__(self):
        return self.labels.shape[0]

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.labels[idx], self.name, self.split,
                              self.num_classes)

    def head(self, n: int) -> "LabeledDataset":
        return self.take(np.arange(min(n, len(self))))

    def subset_per_class(self, k: int) -> "LabeledDataset":
        """First ``k`` examples of every class, kept in original order."""
        keep = []
        for c in range(self.num_classes):
            keep.extend(np.flatnonzero(self.labels == c)[:k])
        return self.take(np.sort(np.asarray(keep, dtype=np.int64)))


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{what}: file shorter than its {header}-byte header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise TruncatedFileError(f"{what}: expected {n} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def pad_to(images: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad (N, C, H, W) images symmetrically to ``size`` x ``size``."""
    h, w = images.shape[-2:]
    if h > size or w > size:
        raise ValueError(f"cannot pad {h}x{w} images down to {size}")
    top, left = (size - h) // 2, (size - w) // 2
    return np.pad(images, ((0, 0), (0, 0), (top, size - h - top), (left, size - w - left)))


def load_mnist_idx(images_path, labels_path, pad=32, split="", center=CENTER) -> LabeledDataset:
    """Parse an MNIST image/label file pair (raw or ``.gz``)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images[:, None, :, :].astype(np.float64) / 255.0
    if pad:
        x = pad_to(x, pad)
    return LabeledDataset(x - center, labels.astype(np.int64), "mnist", split, 10)


def find_mnist(data_dir, split: str) -> tuple:
    """Locate the IDX pair for ``split`` in ``data_dir`` (plain or gzipped)."""
    paths = []
    for stem in MNIST_FILES[split]:
        for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            p = os.path.join(data_dir, cand)
            if os.path.exists(p):
                paths.append(p)
                break
        else:
            raise FileNotFoundError(f"{stem} not found in {data_dir}")
    return tuple(paths)


def load_mnist(data_dir, split="train", **kw) -> LabeledDataset:
    return load_mnist_idx(*find_mnist(data_dir, split), split=split, **kw)


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images (N, H, W) and labels (N,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_cifar10_binary(paths, split="", center=CENTER) -> LabeledDataset:
    """Read one or more CIFAR-10 binary batch files of 3073-byte records."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            raise RecordSizeError(
                f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec.size and rec[:, 0].max() > 9:
            raise LabelRangeError(f"{path}: label byte {int(rec[:, 0].max())} out of range")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(images).astype(np.float64) / 255.0
    return LabeledDataset(x - center, np.concatenate(labels), "cifar10", split, 10)


def write_cifar10_binary(path, images: np.ndarray, labels: np.ndarray):
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(np.concatenate([labels[:, None], images], axis=1).tobytes())


class BatchIterator:
    """Shuffled minibatches; the permutation depends only on (seed, epoch).

    Every index appears exactly once per epoch and a short final batch is kept.
    """

    def __init__(self, dataset: LabeledDataset, batch_size: int, seed: int = 0, epoch: int = 0,
                 shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.shuffle = shuffle

    def __len__(self):
        return -(-len(self.dataset) // self.batch_size)

    def order(self) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        gen = np.random.Generator(np.random.PCG64([self.seed, self.epoch]))
        return gen.permutation(n)

    def index_batches(self):
        order = self.order()
        for start in range(0, len(order), self.batch_size):
            yield order[start:start + self.batch_size]

    def __iter__(self):
        ds = self.dataset
        for idx in self.index_batches():
            yield ds.images[idx], ds.labels[idx]


def batches(dataset: LabeledDataset, batch_size: int, epoch_seed: int = 0, epoch: int = 0,
            shuffle: bool = True) -> BatchIterator:
    return BatchIterator(dataset, batch_size, epoch_seed, epoch, shuffle)
