"""Dataset provisioning: synthetic generators, IDX file loading, batching.

Synthetic generators are fully seeded through an explicit Rng. The IDX
reader follows the canonical big-endian binary layout (magic, dimension
fields, raw bytes) bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import Rng

__all__ = [
    "Dataset",
    "BatchIterator",
    "gen_blobs",
    "gen_spirals",
    "spiral_point",
    "load_idx",
    "standardize",
    "IdxFormatError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError("Dataset: features must be 2-D (examples x dims)")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ValueError("Dataset: labels must be 1-D and match the example count")
        if not np.isfinite(feats).all():
            raise ValueError("Dataset: features contain non-finite values")
        if labels.min(initial=0) < 0 or (labels >= self.num_classes).any():
            raise ValueError("Dataset: labels out of range")
        if feats.shape[0] < self.num_classes:
            raise ValueError("Dataset: fewer examples than classes")
        self.features = feats
        self.labels = labels

    def __len__(self) -> int:
        return self.features.shape[0]


class BatchIterator:
    """Deterministic shuffled batches: every epoch visits each example once.

    The permutation depends only on (seed, epoch), so reconstructing the
    iterator for any epoch reproduces the same batch sequence.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int, epoch: int):
        if batch_size < 1:
            raise ValueError("BatchIterator: batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.order = Rng(seed, key=(epoch,)).permutation(len(dataset))

    def __iter__(self):
        feats, labels = self.dataset.features, self.dataset.labels
        for start in range(0, len(self.order), self.batch_size):
            idx = self.order[start : start + self.batch_size]
            yield feats[idx], labels[idx]

    def __len__(self) -> int:
        n = len(self.order)
        return (n + self.batch_size - 1) // self.batch_size


def gen_blobs(num_classes: int, per_class: int, dim: int, spread: float, rng: Rng) -> Dataset:
    """Gaussian blobs: class k is drawn around a seeded random unit-normal center."""
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("gen_blobs: counts must be >= 1")
    if spread <= 0:
        raise ValueError("gen_blobs: spread must be > 0")
    centers = rng.standard_normal((num_classes, dim))
    feats = np.zeros((num_classes * per_class, dim))
    labels = np.zeros(num_classes * per_class, dtype=np.int64)
    for k in range(num_classes):
        block = slice(k * per_class, (k + 1) * per_class)
        feats[block] = centers[k] + spread * rng.standard_normal((per_class, dim))
        labels[block] = k
    return Dataset(feats, labels, num_classes)


def spiral_point(class_index: int, sample_index: int, per_class: int,
                 num_classes: int, turns: float) -> np.ndarray:
    """Noise-free position of one spiral sample (the parametric arm).

    t = i / per_class in [0, 1); radius r = 0.1 + 0.9 t; angle
    theta = 2*pi*(turns*t + k/num_classes). Class arms are offset by equal
    angles and interleave as t grows.
    """
    t = sample_index / per_class
    r = 0.1 + 0.9 * t
    theta = 2.0 * np.pi * (turns * t + class_index / num_classes)
    return np.array([r * np.cos(theta), r * np.sin(theta)])


def gen_spirals(num_classes: int, per_class: int, noise: float, rng: Rng,
                turns: float = 1.5) -> Dataset:
    """Interleaved 2-D spirals; noise is the isotropic Gaussian jitter scale."""
    if num_classes < 1 or per_class < 1:
        raise ValueError("gen_spirals: counts must be >= 1")
    if noise < 0:
        raise ValueError("gen_spirals: noise must be >= 0")
    feats = np.zeros((num_classes * per_class, 2))
    labels = np.zeros(num_classes * per_class, dtype=np.int64)
    for k in range(num_classes):
        t = np.arange(per_class) / per_class
        r = 0.1 + 0.9 * t
        theta = 2.0 * np.pi * (turns * t + k / num_classes)
        block = slice(k * per_class, (k + 1) * per_class)
        feats[block, 0] = r * np.cos(theta)
        feats[block, 1] = r * np.sin(theta)
        feats[block] += noise * rng.standard_normal((per_class, 2))
        labels[block] = k
    return Dataset(feats, labels, num_classes)


def _read_exact(f, n: int, path, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxTruncatedError(f"{path}: truncated while reading {what}")
    return data


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair.

    Pixels are scaled to [0, 1] and flattened to one row per image. Raises
    IdxMagicError, IdxTruncatedError or IdxCountMismatchError on malformed
    inputs.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(f, 16, images_path, "image header")
        )
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(
                f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, count * rows * cols, images_path, "pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
        feats = pixels.reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(
            ">II", _read_exact(f, 8, labels_path, "label header")
        )
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(
                f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        raw = _read_exact(f, label_count, labels_path, "label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if label_count != count:
        raise IdxCountMismatchError(
            f"image count {count} != label count {label_count}"
        )
    return Dataset(feats, labels, int(labels.max()) + 1 if count else 1)


def standardize(train: Dataset, evaluation: Dataset) -> tuple[Dataset, Dataset]:
    """Per-column z-score using train-split statistics for both splits.

    Columns with (near) zero deviation are left unscaled. CKA itself is
    translation invariant, but optimization is not, hence this step.
    """
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    scale = lambda ds, split: Dataset(
        (ds.features - mean) / std, ds.labels, ds.num_classes, split
    )
    return scale(train, "train"), scale(evaluation, "eval")
