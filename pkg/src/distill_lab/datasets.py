"""Labeled datasets: synthetic Gaussian blobs, IDX/CSV ingestion, splits, bootstrap."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from distill_lab.numkit import (
    STREAM_BOOTSTRAP,
    STREAM_DATA,
    STREAM_SPLIT,
    as_matrix,
    make_rng,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


class DatasetConsistencyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = as_matrix(self.features, "features")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be a 1-D integer array")
        labels = labels.astype(np.int64)
        if features.shape[0] != labels.shape[0]:
            raise DatasetConsistencyError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if labels.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> LabeledDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class BlobSpec:
    """Isotropic Gaussian clusters, one per class.

    Class centers are drawn once as ``center_scale * N(0, I_D)``; points are
    ``center + spread * N(0, I_D)``. With the defaults a one-hidden-layer
    MLP reaches about 85% test accuracy.
    """

    num_classes: int = 10
    per_class: int = 500
    dim: int = 16
    spread: float = 1.0
    center_scale: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.spread < 0:
            raise ValueError("spread must be non-negative")
        if not self.center_scale > 0:
            raise ValueError("center_scale must be positive")


def gen_blobs(spec: BlobSpec) -> LabeledDataset:
    rng = make_rng(spec.seed, STREAM_DATA)
    centers = spec.center_scale * rng.standard_normal((spec.num_classes, spec.dim))
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    noise = rng.standard_normal((labels.shape[0], spec.dim))
    features = centers[labels] + spec.spread * noise
    return LabeledDataset(features, labels, spec.num_classes)


def bootstrap(ds: LabeledDataset, seed: int) -> LabeledDataset:
    """Resample ``len(ds)`` points with replacement."""
    rng = make_rng(seed, STREAM_BOOTSTRAP)
    idx = rng.integers(0, len(ds), size=len(ds))
    return ds.take(idx)


def split(ds: LabeledDataset, train_fraction: float, seed: int):
    """Stratified train/test split.

    Each class contributes ``round(train_fraction * count)`` samples to the
    train side, kept within ``[0, count]``; the rest go to test. Both sides
    keep the full class count ``K`` even if a class ends up absent.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = make_rng(seed, STREAM_SPLIT)
    train_idx, test_idx = [], []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        members = members[rng.permutation(members.shape[0])]
        n_train = int(np.floor(train_fraction * members.shape[0] + 0.5))
        train_idx.append(members[:n_train])
        test_idx.append(members[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    if train_idx.size == 0 or test_idx.size == 0:
        raise ValueError("split leaves one side empty; adjust train_fraction")
    return ds.take(train_idx), ds.take(test_idx)


def _read_exact(f, n: int, path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise OSError(f"{path}: truncated file (wanted {n} bytes, got {len(data)})")
    return data


def _read_idx(path, magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        (found,) = struct.unpack(">I", _read_exact(f, 4, path))
        if found != magic:
            raise DatasetFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(f, 4 * ndim, path))
        count = int(np.prod(dims))
        body = _read_exact(f, count, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX (MNIST-layout) image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DatasetConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return LabeledDataset(features, labels, k)


def load_csv(path, num_classes: int | None = None) -> LabeledDataset:
    """Header row, an integer ``label`` column, every other column a float feature."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        if "label" not in header:
            raise DatasetFormatError(f"{path}: no 'label' column")
        li = header.index("label")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                labels.append(int(row[li]))
                feats.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise DatasetFormatError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return LabeledDataset(np.asarray(feats, dtype=np.float64), labels, k)


def write_csv(ds: LabeledDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
