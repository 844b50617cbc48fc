"""Dataset loading, IID partitioning and adversarial label flipping.

Supported sources: IDX image/label pairs (big-endian, the de-facto MNIST
layout, plain or gzipped), CIFAR-10 binary batches (3073-byte records,
channel-major RGB), and synthetic Gaussian blobs with configurable class-mean
geometry so the ground-truth nearest-class structure is known.
"""

from __future__ import annotations

import gzip
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DomainError, FormatError
from .rng import stream

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    """Batched samples: x is (n, ...) float64 in [0,1]-ish, y is (n,) int64."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise DomainError(
                f"{self.x.shape[0]} inputs but {self.y.shape[0]} labels")
        if not np.isfinite(self.x).all():
            raise DomainError("dataset inputs contain non-finite values")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DomainError(
                f"labels out of range [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.y == c)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.x[indices], self.y[indices], self.num_classes)


@dataclass(frozen=True)
class PoisonSpec:
    """Label-flipping recipe: relabel floor(rate * n) samples to target,
    drawing source-class samples first."""

    source: int
    target: int
    rate: float

    def __post_init__(self):
        if self.source == self.target:
            raise DomainError("poison source and target classes must differ")
        if not 0.0 < self.rate <= 1.0:
            raise DomainError(f"injection rate must be in (0, 1], got {self.rate}")


@dataclass
class PartitionPlan:
    """Disjoint per-client sample index lists."""

    client_indices: list[np.ndarray]
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def _open_maybe_gzip(path):
    f = open(path, "rb")
    head = f.read(2)
    f.seek(0)
    if head == b"\x1f\x8b":
        f.close()
        return gzip.open(path, "rb")
    return f


def _read_exact(f, count: int, offset: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise FormatError(
            f"truncated {what}: wanted {count} bytes at offset {offset}, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair. Pixels are scaled to [0, 1] and images
    get a leading single-plane axis, giving x of shape (n, 1, rows, cols)."""
    with _open_maybe_gzip(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, 0, "IDX image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"bad IDX image magic 0x{magic:08x} at offset 0 in {images_path}")
        raw = _read_exact(f, count * rows * cols, 16, "IDX image data")
        if f.read(1):
            raise FormatError(f"trailing bytes after offset {16 + len(raw)} in {images_path}")
    with _open_maybe_gzip(labels_path) as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, 0, "IDX label header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"bad IDX label magic 0x{magic:08x} at offset 0 in {labels_path}")
        raw_labels = _read_exact(f, label_count, 8, "IDX label data")
        if f.read(1):
            raise FormatError(f"trailing bytes after offset {8 + label_count} in {labels_path}")
    if label_count != count:
        raise FormatError(
            f"label count {label_count} does not match image count {count}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8)
    return Dataset(images / 255.0, labels.astype(np.int64), num_classes=10)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Encode uint8 images (n, rows, cols) and labels back into IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.tobytes())


def load_cifar_bin(paths) -> Dataset:
    """Load one or more CIFAR-10 binary batch files into (n, 3, 32, 32)."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % CIFAR_RECORD != 0:
            raise FormatError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD} "
                f"(first partial record at offset {len(raw) - len(raw) % CIFAR_RECORD})")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(records[:, 0].astype(np.int64))
        xs.append(records[:, 1:].reshape(-1, 3, 32, 32) / 255.0)
    return Dataset(np.concatenate(xs), np.concatenate(ys), num_classes=10)


def paired_means(num_classes: int, dim: int, near: float, far: float) -> np.ndarray:
    """Class means arranged in pairs: pair centers sit far apart on distinct
    axes and pair members are `near` apart, so every class has a unique,
    known nearest neighbour (its pair partner)."""
    pairs = (num_classes + 1) // 2
    if dim < 2 * pairs:
        raise DomainError(f"need dim >= {2 * pairs} for {num_classes} paired classes")
    means = np.zeros((num_classes, dim))
    for p in range(pairs):
        lo, hi = 2 * p, 2 * p + 1
        means[lo, p] = far
        means[lo, pairs + p] = near / 2.0
        if hi < num_classes:
            means[hi, p] = far
            means[hi, pairs + p] = -near / 2.0
    return means


def synth_blobs(means: np.ndarray, per_class: int, noise: float,
                seed: int | np.random.Generator) -> Dataset:
    """Isotropic Gaussian blobs around the given class means."""
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise DomainError("need a (classes, dim) mean matrix with >= 2 classes")
    if noise <= 0:
        raise DomainError(f"noise sigma must be positive, got {noise}")
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "blobs")
    c, dim = means.shape
    x = np.empty((c * per_class, dim))
    y = np.empty(c * per_class, dtype=np.int64)
    for cls in range(c):
        lo = cls * per_class
        x[lo:lo + per_class] = means[cls] + rng.normal(0.0, noise, size=(per_class, dim))
        y[lo:lo + per_class] = cls
    order = rng.permutation(c * per_class)
    return Dataset(x[order], y[order], num_classes=c)


def nearest_class(means: np.ndarray, source: int) -> int:
    """Ground-truth nearest class to `source` by mean distance, ties to the
    lowest index."""
    means = np.asarray(means, dtype=np.float64)
    d = np.linalg.norm(means - means[source], axis=1)
    d[source] = np.inf
    return int(np.argmin(d))


def partition_iid(dataset: Dataset, num_clients: int, per_client: int, seed: int) -> PartitionPlan:
    """Disjoint uniform random shards of equal size."""
    need = num_clients * per_client
    if need > len(dataset):
        raise CapacityError(
            f"cannot draw {num_clients} x {per_client} samples from {len(dataset)}")
    perm = stream(seed, "partition").permutation(len(dataset))
    shards = [np.sort(perm[i * per_client:(i + 1) * per_client]) for i in range(num_clients)]
    return PartitionPlan(client_indices=shards, seed=seed)


def flip_count(rate: float, n: int) -> int:
    # guards floor() against float dust in rate * n
    return int(math.floor(rate * n + 1e-9))


def flip_labels(dataset: Dataset, spec: PoisonSpec, rng: np.random.Generator) -> Dataset:
    """Relabel exactly floor(rate * n) samples to the target class.

    All source-class samples are flipped first; a shortfall is filled with
    uniformly chosen other samples, an excess is resolved by uniformly
    subsampling the source class. Inputs are never modified.
    """
    if len(dataset) == 0:
        raise DomainError("cannot poison an empty dataset")
    n = len(dataset)
    need = flip_count(spec.rate, n)
    src = dataset.class_indices(spec.source)
    if src.size == 0:
        log.warning("poison source class %d absent from shard; flipping %d non-source samples",
                    spec.source, need)
    if src.size > need:
        chosen = rng.choice(src, size=need, replace=False)
    else:
        others = np.setdiff1d(np.arange(n), src, assume_unique=False)
        extra = rng.choice(others, size=need - src.size, replace=False) if need > src.size else \
            np.empty(0, dtype=np.int64)
        chosen = np.concatenate([src, extra])
    y = dataset.y.copy()
    y[chosen.astype(np.int64)] = spec.target
    return Dataset(dataset.x, y, dataset.num_classes)
