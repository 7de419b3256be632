"""Dataset loading, synthetic generators and minibatch plans.

Inputs always live in the pixel domain [0, 1]; attacks clip against it.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .tensor import Tensor

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ContractError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ContractError("inputs must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.inputs.shape[1:]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)

    def split(self, test_fraction, seed=0):
        """Stratified train/test split."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for c in range(self.num_classes):
            idx = np.flatnonzero(self.labels == c)
            idx = idx[rng.permutation(len(idx))]
            k = int(round(len(idx) * test_fraction))
            test.extend(idx[:k])
            train.extend(idx[k:])
        return self.subset(np.sort(train)), self.subset(np.sort(test))


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout: per record one label byte then 3072 pixel bytes
# (1024 red, 1024 green, 1024 blue, each row-major 32x32).


def _read_cifar_records(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"({len(raw) - offset} of {CIFAR_RECORD} bytes present)"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    return rec[:, 1:], labels


def load_cifar10_binary(path, classes=None, per_class_cap=None):
    """Load one CIFAR-10 ``.bin`` file (or a list of them, concatenated in order).

    ``classes`` keeps only the listed labels; ``per_class_cap`` keeps the first
    ``cap`` records of each class in file order.
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    pixels, labels = [], []
    for p in paths:
        px, lb = _read_cifar_records(p)
        pixels.append(px)
        labels.append(lb)
    pixels = np.concatenate(pixels) if pixels else np.zeros((0, 3072), np.uint8)
    labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)

    keep = np.ones(len(labels), dtype=bool)
    if classes is not None:
        keep &= np.isin(labels, list(classes))
    if per_class_cap is not None:
        seen = {}
        for i in np.flatnonzero(keep):
            c = int(labels[i])
            seen[c] = seen.get(c, 0) + 1
            if seen[c] > per_class_cap:
                keep[i] = False
    idx = np.flatnonzero(keep)
    inputs = pixels[idx].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0
    return Dataset(inputs, labels[idx], 10)


def write_cifar10_binary(path, inputs, labels):
    """Quantise [0, 1] images to bytes and write them in CIFAR-10 record order."""
    inputs = np.asarray(inputs, dtype=np.float64).reshape(len(labels), -1)
    if inputs.shape[1] != 3072:
        raise ContractError("CIFAR-10 records hold 3x32x32 images")
    pixels = np.clip(np.rint(inputs * 255.0), 0, 255).astype(np.uint8)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def find_cifar10_dir(candidates=None):
    """Return a directory containing ``data_batch_1.bin`` and ``test_batch.bin``, or None.

    Checks ``$EAEKIT_CIFAR10`` first, then ``candidates``.
    """
    dirs = []
    if os.environ.get("EAEKIT_CIFAR10"):
        dirs.append(os.environ["EAEKIT_CIFAR10"])
    dirs.extend(candidates or [])
    for d in dirs:
        if os.path.isfile(os.path.join(d, "data_batch_1.bin")) and os.path.isfile(os.path.join(d, "test_batch.bin")):
            return d
    return None


def load_cifar10_subset(directory, classes=None, train_per_class=200, test_per_class=100):
    train_files = sorted(
        os.path.join(directory, f) for f in os.listdir(directory) if f.startswith("data_batch_") and f.endswith(".bin")
    )
    train = load_cifar10_binary(train_files, classes, train_per_class)
    test = load_cifar10_binary(os.path.join(directory, "test_batch.bin"), classes, test_per_class)
    return train, test


# ---------------------------------------------------------------------------
# IDX (MNIST-style) files


_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic")
    dtype = _IDX_TYPES.get(raw[2])
    if dtype is None:
        raise FormatError(f"{path}: unknown IDX element type 0x{raw[2]:02x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    itemsize = np.dtype(dtype).itemsize
    if len(raw) - header != count * itemsize:
        raise FormatError(f"{path}: expected {count * itemsize} payload bytes at offset {header}, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes=10):
    images = read_idx(images_path).astype(np.float64)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim == 3:
        images = images[:, None, :, :]
    if images.max(initial=0) > 1.0:
        images = images / 255.0
    return Dataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# synthetic data


def _balanced_labels(n, c, rng):
    labels = np.arange(n) % c
    return labels[rng.permutation(n)]


def _minmax(x):
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    out = np.full_like(x, 0.5)
    ok = span > 0
    out[:, ok] = (x[:, ok] - lo[ok]) / span[ok]
    return out


def make_synthetic(kind="gaussian-blobs", num_classes=3, n=300, dim=2, noise=0.5, seed=0):
    """Balanced vector data scaled into [0, 1] per feature.

    ``gaussian-blobs`` puts one isotropic cluster per class around a standard
    normal centre; ``rings`` puts class ``k`` on a circle of radius ``k + 1``
    in the first two coordinates.
    """
    if num_classes < 2 or n < num_classes:
        raise ContractError("need at least 2 classes and one example per class")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, num_classes, rng)
    if kind == "gaussian-blobs":
        centres = rng.normal(size=(num_classes, dim))
        x = centres[labels] + noise * rng.normal(size=(n, dim))
    elif kind == "rings":
        if dim < 2:
            raise ContractError("rings need dim >= 2")
        angle = rng.uniform(0, 2 * np.pi, size=n)
        radius = labels + 1.0
        x = noise * rng.normal(size=(n, dim))
        x[:, 0] += radius * np.cos(angle)
        x[:, 1] += radius * np.sin(angle)
    else:
        raise ContractError(f"unknown synthetic kind {kind!r}")
    return Dataset(_minmax(x), labels, num_classes)


def make_image_surrogate(num_classes=10, per_class=300, noise=0.5, seed=0, shape=CIFAR_SHAPE):
    """CIFAR-shaped images built from per-class low-frequency colour templates.

    Each example mixes its class template with a random distractor pattern and
    pixel noise, so the task is learnable but not trivially separable. Used
    when real CIFAR-10 files are not available.
    """
    c, h, w = shape
    rng = np.random.default_rng(seed)

    def field(count, cells):
        coarse = rng.normal(size=(count, c, cells, cells))
        return np.kron(coarse, np.ones((1, 1, h // cells, w // cells)))

    templates = field(num_classes, 4) + 0.5 * field(num_classes, 8)
    n = num_classes * per_class
    labels = _balanced_labels(n, num_classes, rng)
    distractor = field(n, 4)
    mix = rng.uniform(0.2, 0.5, size=(n, 1, 1, 1))
    x = mix * templates[labels] + (1 - mix) * distractor + noise * rng.normal(size=(n, c, h, w))
    x = 1.0 / (1.0 + np.exp(-1.2 * x))
    # quantise like 8-bit images so the binary round trip is exact
    x = np.rint(x * 255.0) / 255.0
    return Dataset(x, labels, num_classes)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")

    def count(self, n):
        return math.ceil(n / self.batch_size)


def batch_indices(n, plan, epoch=0):
    order = np.random.default_rng([plan.seed, epoch]).permutation(n)
    return [order[i : i + plan.batch_size] for i in range(0, n, plan.batch_size)]


def batches(dataset, plan, epoch=0):
    """Yield ``(Tensor, labels)`` minibatches over a fresh permutation per epoch."""
    for idx in batch_indices(len(dataset), plan, epoch):
        yield Tensor(dataset.inputs[idx]), dataset.labels[idx]
