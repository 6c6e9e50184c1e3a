"""
Data collection for DPSGD tuning runs.
Reads MNIST (IDX) and CIFAR-10 (binary) files, generates synthetic blobs,
carves deterministic stratified train/validation subsets, and keeps the
per-sample visit counters.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

PathLike = Union[str, Path]

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
MNIST_CLASSES = 10

CIFAR10_RECORD_BYTES = 3073
CIFAR10_PIXELS = 3072
CIFAR10_CLASSES = 10


class DatasetError(Exception):
    """Base class for dataset loading and splitting errors."""


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


class RecordLengthError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class InsufficientSamplesError(DatasetError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Features scaled to [0, 1], integer labels and stable sample ids."""
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n or self.sample_ids.shape[0] != n:
            raise DatasetError(f"{self.name}: features, labels and ids disagree on sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"{self.name}: labels outside [0, {self.num_classes})")
        if not np.isfinite(self.features).all():
            raise DatasetError(f"{self.name}: non-finite feature values")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def take(self, positions: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return Dataset(
            features=self.features[positions],
            labels=self.labels[positions],
            sample_ids=self.sample_ids[positions],
            name=name or self.name,
            num_classes=self.num_classes,
        )


@dataclass
class VisitCounter:
    """
    How often each training sample entered a minibatch.

    Indexed by position in the training subset; `sample_ids` maps positions
    back to the parent dataset's ids for export.
    """
    counts: np.ndarray
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.counts.shape[0], dtype=np.int64)

    @classmethod
    def zeros(cls, size: int, sample_ids: Optional[np.ndarray] = None) -> "VisitCounter":
        return cls(np.zeros(size, dtype=np.int64), sample_ids)

    @classmethod
    def for_dataset(cls, ds: Dataset) -> "VisitCounter":
        return cls.zeros(len(ds), ds.sample_ids.copy())

    def __len__(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "VisitCounter":
        return VisitCounter(self.counts.copy(), self.sample_ids.copy())


def record_visits(counter: VisitCounter, batch_ids: Iterable[int]) -> VisitCounter:
    """Add one visit per occurrence of each id in the batch."""
    ids = np.asarray(list(batch_ids) if not isinstance(batch_ids, np.ndarray) else batch_ids,
                     dtype=np.int64)
    if ids.size == 0:
        return counter
    if ids.min() < 0 or ids.max() >= len(counter):
        raise ValueError(f"visit id out of range for counter of length {len(counter)}")
    np.add.at(counter.counts, ids, 1)
    return counter


def merge_counters(counters: Sequence[VisitCounter]) -> VisitCounter:
    """Elementwise sum of per-trial shards."""
    if not counters:
        raise ValueError("nothing to merge")
    merged = counters[0].copy()
    for shard in counters[1:]:
        if len(shard) != len(merged):
            raise ValueError("cannot merge counters of different lengths")
        merged.counts += shard.counts
    return merged


def _read_be32(data: bytes, offset: int, path: Path) -> int:
    if len(data) < offset + 4:
        raise TruncatedFileError(f"{path}: header truncated")
    return struct.unpack_from(">I", data, offset)[0]


def load_mnist_idx(images_path: PathLike, labels_path: PathLike) -> Dataset:
    """
    Parse a big-endian IDX image/label pair.

    Images: magic 0x00000803, count, rows, cols, then uint8 pixels row-wise.
    Labels: magic 0x00000801, count, then uint8 labels.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    image_bytes = images_path.read_bytes()
    label_bytes = labels_path.read_bytes()

    magic = _read_be32(image_bytes, 0, images_path)
    if magic != MNIST_IMAGE_MAGIC:
        raise BadMagicError(f"{images_path}: bad magic 0x{magic:08x}")
    count = _read_be32(image_bytes, 4, images_path)
    rows = _read_be32(image_bytes, 8, images_path)
    cols = _read_be32(image_bytes, 12, images_path)
    expected = 16 + count * rows * cols
    if len(image_bytes) < expected:
        raise TruncatedFileError(f"{images_path}: expected {expected} bytes, found {len(image_bytes)}")

    magic = _read_be32(label_bytes, 0, labels_path)
    if magic != MNIST_LABEL_MAGIC:
        raise BadMagicError(f"{labels_path}: bad magic 0x{magic:08x}")
    label_count = _read_be32(label_bytes, 4, labels_path)
    if len(label_bytes) < 8 + label_count:
        raise TruncatedFileError(f"{labels_path}: expected {8 + label_count} bytes, found {len(label_bytes)}")
    if label_count != count:
        raise CountMismatchError(f"{count} images but {label_count} labels")
    if count == 0:
        raise DatasetError(f"{images_path}: no images")

    pixels = np.frombuffer(image_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    if labels.max() >= MNIST_CLASSES:
        raise LabelRangeError(f"{labels_path}: label {labels.max()} > 9")
    return Dataset(
        features=pixels.reshape(count, rows * cols).astype(np.float64) / 255.0,
        labels=labels,
        sample_ids=np.arange(count, dtype=np.int64),
        name="mnist",
        num_classes=MNIST_CLASSES,
    )


def synthetic(n: int, d: int, classes: int, separation: float, seed: int) -> Dataset:
    """
    Gaussian class blobs with unit variance. Class means sit on orthonormal
    directions scaled so that any two means are `separation` apart; the whole
    matrix is then min-max rescaled into [0, 1].
    """
    if classes < 2 or n < classes:
        raise DatasetError(f"need n >= classes >= 2, got n={n}, classes={classes}")
    if separation < 0:
        raise DatasetError("separation must be >= 0")
    rng = np.random.default_rng(seed)

    if d >= classes:
        directions, _ = np.linalg.qr(rng.normal(size=(d, classes)))
        directions = directions.T
    else:
        directions = rng.normal(size=(classes, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * (separation / np.sqrt(2.0))

    labels = rng.permutation(np.arange(n) % classes)
    features = means[labels] + rng.normal(size=(n, d))
    span = features.max() - features.min()
    features = (features - features.min()) / (span if span > 0 else 1.0)
    return Dataset(
        features=features,
        labels=labels.astype(np.int64),
        sample_ids=np.arange(n, dtype=np.int64),
        name="synthetic",
        num_classes=classes,
    )


def _allocate(total: int, weights: np.ndarray, capacity: np.ndarray) -> np.ndarray:
    """Split `total` proportionally to weights (largest remainder), respecting capacity."""
    quota = total * weights / weights.sum() if weights.sum() > 0 else np.zeros_like(weights, dtype=float)
    alloc = np.minimum(np.floor(quota).astype(np.int64), capacity)
    remainder = quota - np.floor(quota)
    # Hand out what is left by largest remainder, then by spare capacity.
    for c in np.lexsort((np.arange(len(weights)), -remainder)):
        if alloc.sum() >= total:
            break
        if alloc[c] < capacity[c]:
            alloc[c] += 1
    while alloc.sum() < total:
        spare = np.flatnonzero(alloc < capacity)
        if spare.size == 0:
            raise InsufficientSamplesError(f"cannot allocate {total} samples")
        alloc[spare[0]] += 1
    return alloc


def subset(ds: Dataset, n_train: int, n_valid: int, seed: int) -> Tuple[Dataset, Dataset]:
    """Disjoint, class-stratified, seeded train/validation subsets keeping parent ids."""
    if n_train < 0 or n_valid < 0:
        raise DatasetError("subset sizes must be >= 0")
    if n_train + n_valid > len(ds):
        raise InsufficientSamplesError(
            f"{ds.name}: requested {n_train}+{n_valid} samples from {len(ds)}"
        )
    rng = np.random.default_rng(seed)
    class_counts = np.bincount(ds.labels, minlength=ds.num_classes)
    pools = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.num_classes)]

    train_alloc = _allocate(n_train, class_counts.astype(float), class_counts)
    valid_alloc = _allocate(n_valid, class_counts.astype(float), class_counts - train_alloc)

    train_pos = np.concatenate([pool[:k] for pool, k in zip(pools, train_alloc)])
    valid_pos = np.concatenate([
        pool[t:t + v] for pool, t, v in zip(pools, train_alloc, valid_alloc)
    ])
    train_pos = rng.permutation(train_pos).astype(np.int64)
    valid_pos = rng.permutation(valid_pos).astype(np.int64)
    return ds.take(train_pos, f"{ds.name}-train"), ds.take(valid_pos, f"{ds.name}-valid")


class DataCollector:
    """Loads the configured dataset source and splits it for a tuning run."""

    def __init__(self, source: str, n_train: int, n_valid: int, seed: int = 0,
                 mnist_images: Optional[PathLike] = None, mnist_labels: Optional[PathLike] = None,
                 cifar_batches: Sequence[PathLike] = (), synthetic_n: int = 2500,
                 synthetic_d: int = 20, synthetic_classes: int = 4,
                 synthetic_separation: float = 3.0):
        self.source = source
        self.n_train = n_train
        self.n_valid = n_valid
        self.seed = seed
        self.mnist_images = mnist_images
        self.mnist_labels = mnist_labels
        self.cifar_batches = list(cifar_batches)
        self.synthetic_params = (synthetic_n, synthetic_d, synthetic_classes, synthetic_separation)
        self.logger = logging.getLogger(__name__)

    def load(self) -> Dataset:
        """Load the full source dataset."""
        try:
            if self.source == "mnist":
                if not self.mnist_images or not self.mnist_labels:
                    raise DatasetError("mnist source needs image and label paths")
                ds = load_mnist_idx(self.mnist_images, self.mnist_labels)
            elif self.source == "cifar10":
                ds = load_cifar10_bin(self.cifar_batches)
            elif self.source == "synthetic":
                n, d, classes, separation = self.synthetic_params
                ds = synthetic(n, d, classes, separation, self.seed)
            else:
                raise DatasetError(f"unknown dataset source {self.source!r}")
        except OSError as e:
            raise DatasetError(f"cannot read {self.source} files: {e}") from e
        self.logger.info(f"Loaded {ds.name}: {len(ds)} samples, {ds.dim} features")
        return ds

    def collect(self) -> Tuple[Dataset, Dataset]:
        """Load and split into (train, valid)."""
        train, valid = subset(self.load(), self.n_train, self.n_valid, self.seed)
        if len(train) == 0 or len(valid) == 0:
            raise InsufficientSamplesError("a tuning run needs non-empty train and validation sets")
        self.logger.info(f"Split into {len(train)} train / {len(valid)} validation samples")
        return train, valid
