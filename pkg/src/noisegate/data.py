"""Datasets, IDX parsing, and worker shard construction.

Shards are index arrays into one Dataset, so partition plans stay cheap and a
shard can be handed to a worker as array views.  The non-IID splitter follows
the reweight-then-rechunk recipe: per-class proportional slices are dealt to
the workers, the dealt lists are concatenated, and the concatenation is cut
again into n contiguous blocks.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX input."""


class IdxMagicError(IdxError):
    """The magic number does not match the expected record type."""


class IdxTruncatedError(IdxError):
    """The file is shorter (or longer) than its header promises."""


class IdxCountMismatchError(IdxError):
    """Image and label files disagree on the number of records."""


@dataclass
class Dataset:
    """Feature matrix, integer labels, and the class count."""

    features: np.ndarray   # (N, f) float64
    labels: np.ndarray     # (N,) int64
    n_classes: int
    name: str = ""

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (N, f) aligned with (N,) labels")
        if len(self.labels) > 0 and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside 0..n_classes-1")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray, name: str = "") -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.n_classes,
                       name or self.name)


def synthetic_classes(n_samples: int, n_classes: int, feature_dim: int,
                      separation: float, rng: np.random.Generator) -> Dataset:
    """Gaussian blobs: class means at separation * random unit directions, unit variance."""
    if n_samples < 1 or n_classes < 2 or feature_dim < 1:
        raise ValueError("need n_samples >= 1, n_classes >= 2, feature_dim >= 1")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    directions = rng.standard_normal((n_classes, feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    features = means[labels] + rng.standard_normal((n_samples, feature_dim))
    return Dataset(features, labels, n_classes, name="synthetic")


# ---------------------------------------------------------------------------
# IDX binary format
# ---------------------------------------------------------------------------


def _read_header(raw: bytes, n_fields: int, path: Path) -> tuple[int, ...]:
    size = 4 * n_fields
    if len(raw) < size:
        raise IdxTruncatedError(f"{path}: {len(raw)} bytes is too short for the header")
    return struct.unpack(f">{n_fields}I", raw[:size])


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse big-endian IDX image/label pairs into a Dataset with pixels in [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw_img = images_path.read_bytes()
    magic, n_img, rows, cols = _read_header(raw_img, 4, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    body = raw_img[16:]
    if len(body) != n_img * rows * cols:
        raise IdxTruncatedError(
            f"{images_path}: header promises {n_img * rows * cols} pixel bytes, found {len(body)}")

    raw_lbl = labels_path.read_bytes()
    magic, n_lbl = _read_header(raw_lbl, 2, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxMagicError(f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    lbl_body = raw_lbl[8:]
    if len(lbl_body) != n_lbl:
        raise IdxTruncatedError(
            f"{labels_path}: header promises {n_lbl} label bytes, found {len(lbl_body)}")

    if n_img != n_lbl:
        raise IdxCountMismatchError(f"{n_img} images vs {n_lbl} labels")
    features = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    features = features.reshape(n_img, rows * cols)
    labels = np.frombuffer(lbl_body, dtype=np.uint8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if n_lbl else 0
    return Dataset(features, labels, n_classes, name=images_path.stem)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


@dataclass
class PartitionPlan:
    """Per-worker index arrays into one dataset; shards are disjoint and cover it."""

    shards: list[np.ndarray]

    def sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


def partition_iid(dataset: Dataset, n_workers: int, rng: np.random.Generator) -> PartitionPlan:
    """Shuffle and deal into n near-equal shards (sizes differ by at most 1)."""
    if n_workers < 1 or n_workers > len(dataset):
        raise ValueError(f"cannot split {len(dataset)} examples into {n_workers} shards")
    perm = rng.permutation(len(dataset))
    return PartitionPlan([np.sort(s) for s in np.array_split(perm, n_workers)])


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to total, proportional with largest-remainder rounding."""
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    shortfall = total - int(counts.sum())
    if shortfall > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:shortfall]] += 1
    return counts


def get_non_iid(dataset: Dataset, n_workers: int, rng: np.random.Generator) -> PartitionPlan:
    """Class-skewed shards via per-class random proportions plus a final re-chunk.

    For each class, n normalized uniform draws decide how much of that class's
    (contiguous) index list each worker is dealt.  The dealt lists are then
    concatenated worker-by-worker and the concatenation is re-cut into n
    contiguous blocks of ceil(N/n); the last block may be smaller.
    """
    if n_workers < 1 or n_workers > len(dataset):
        raise ValueError(f"cannot split {len(dataset)} examples into {n_workers} shards")
    dealt: list[list[np.ndarray]] = [[] for _ in range(n_workers)]
    for cls in range(dataset.n_classes):
        cls_idx = np.flatnonzero(dataset.labels == cls)
        draws = rng.random(n_workers)
        proportions = draws / draws.sum()
        counts = _largest_remainder(proportions, len(cls_idx))
        offsets = np.concatenate(([0], np.cumsum(counts)))
        for i in range(n_workers):
            dealt[i].append(cls_idx[offsets[i]:offsets[i + 1]])
    flat = np.concatenate([np.concatenate(parts) for parts in dealt])
    chunk = math.ceil(len(flat) / n_workers)
    shards = [flat[i * chunk:(i + 1) * chunk] for i in range(n_workers)]
    return PartitionPlan(shards)


def sample_auxiliary(validation: Dataset, per_class: int, rng: np.random.Generator) -> Dataset:
    """Class-balanced trusted batch: per_class draws from each class, no replacement."""
    if per_class < 1:
        raise ValueError("per_class must be positive")
    picks = []
    for cls in range(validation.n_classes):
        cls_idx = np.flatnonzero(validation.labels == cls)
        if len(cls_idx) < per_class:
            raise ValueError(
                f"class {cls} has {len(cls_idx)} validation examples, need {per_class}")
        picks.append(rng.choice(cls_idx, size=per_class, replace=False))
    return validation.subset(np.concatenate(picks), name="auxiliary")
