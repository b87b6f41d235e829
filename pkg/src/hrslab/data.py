"""Dataset ingestion: IDX files, synthetic blob images and the bundled MNIST subset."""

from __future__ import annotations

import functools
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) < 1:
            raise ValueError("a batch holds at least one example")
        if len(self.inputs) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels"
            )
        if self.inputs.min() < 0.0 or self.inputs.max() > 1.0:
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Batch(self.inputs[idx], self.labels[idx])

    def reshape(self, *shape):
        return Batch(self.inputs.reshape(len(self), *shape), self.labels)


def _read(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse(raw, magic, path):
    if len(raw) < 4:
        raise TruncatedError(f"{path}: file shorter than its header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - head < size:
        raise TruncatedError(f"{path}: payload holds {len(raw) - head} of {size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> Batch:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _parse(_read(images_path), IMAGES_MAGIC, images_path)
    labels = _parse(_read(labels_path), LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{len(images)} images in {images_path} but {len(labels)} labels in {labels_path}"
        )
    return Batch(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(n, h, w)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", LABELS_MAGIC))
        f.write(struct.pack(">I", labels.shape[0]))
        f.write(labels.tobytes())


def gen_synthetic(seed, classes, hw, n, noise=0.08, jitter=1.5) -> Batch:
    """Class-conditional Gaussian-blob images of size ``hw x hw``.

    Every class owns a blob centre and width; samples jitter the centre, add
    pixel noise and are clipped to [0, 1].  Labels are balanced (counts differ
    by at most one) and shuffled.
    """
    if n < classes:
        raise ValueError("need at least one example per class")
    rng = np.random.default_rng(seed)
    margin = 0.2 * hw
    centres = rng.uniform(margin, hw - 1 - margin, (classes, 2))
    widths = rng.uniform(0.08 * hw, 0.16 * hw, classes)
    labels = rng.permutation(np.arange(n) % classes)
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    c = centres[labels] + rng.normal(0.0, jitter, (n, 2))
    w = widths[labels][:, None, None]
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    img = np.exp(-d2 / (2 * w**2)) + rng.normal(0.0, noise, (n, hw, hw))
    return Batch(np.clip(img, 0.0, 1.0), labels)


@functools.lru_cache(maxsize=1)
def _bundled_digits():
    try:
        from mlxtend.data import mnist_data
    except ImportError as e:  # pragma: no cover
        raise ImportError("the bundled MNIST subset needs `pip install mlxtend`") from e
    x, y = mnist_data()
    x.setflags(write=False)
    y.setflags(write=False)
    return x, y


def mnist_subset(seed=0, n_train=3000, n_test=2000) -> tuple[Batch, Batch]:
    """Split of the 5000 real MNIST digits shipped with ``mlxtend``.

    Used when full IDX files are not available locally.  The split is
    stratified-by-shuffle and reproducible from ``seed``.
    """
    x, y = _bundled_digits()
    if n_train + n_test > len(x):
        raise ValueError(f"only {len(x)} bundled digits available")
    order = np.random.default_rng(seed).permutation(len(x))
    x = x[order].reshape(-1, 28, 28) / 255.0
    y = y[order].astype(np.int64)
    return (
        Batch(x[:n_train], y[:n_train]),
        Batch(x[n_train : n_train + n_test], y[n_train : n_train + n_test]),
    )


def export_mnist_subset(directory, seed=0, n_train=3000, n_test=2000):
    """Write the bundled subset as four IDX files; returns their paths."""
    os.makedirs(directory, exist_ok=True)
    train, test = mnist_subset(seed, n_train, n_test)
    paths = {}
    for name, b in (("train", train), ("t10k", test)):
        ip = os.path.join(directory, f"{name}-images-idx3-ubyte")
        lp = os.path.join(directory, f"{name}-labels-idx1-ubyte")
        write_idx(ip, lp, np.rint(b.inputs * 255).astype(np.uint8), b.labels)
        paths[name] = (ip, lp)
    return paths
