from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterator

import numpy as np

from app.errors import EmptySplit, InsufficientSamples, InvalidDimension, InvalidParameter, LabelOutOfRange, ShapeMismatch, SingleClassUnsupported
from app.models import NoiseSpec
from app.services.numkernel import DenseMatrix, as_matrix, l2_normalize_rows

logger = logging.getLogger(__name__)


class SplitTag(str, Enum):
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: DenseMatrix
    true_labels: np.ndarray
    train_labels: np.ndarray
    split_tags: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        features = as_matrix(self.features, "features")
        count = features.shape[0]
        true_labels = np.asarray(self.true_labels).astype(np.int64)
        train_labels = np.asarray(self.train_labels).astype(np.int64)
        tags = np.asarray(self.split_tags).astype(str)
        if true_labels.shape != (count,) or train_labels.shape != (count,) or tags.shape != (count,):
            raise ShapeMismatch("labels and split tags must have one entry per feature row")
        for name, labels in (("true_labels", true_labels), ("train_labels", train_labels)):
            if count and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise LabelOutOfRange(f"{name} must lie in [0, {self.num_classes})")
        unknown = set(tags.tolist()) - {tag.value for tag in SplitTag}
        if unknown:
            raise ShapeMismatch(f"unknown split tags {sorted(unknown)}")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "true_labels", true_labels)
        object.__setattr__(self, "train_labels", train_labels)
        object.__setattr__(self, "split_tags", tags)

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def indices(self, tag: SplitTag) -> np.ndarray:
        return np.flatnonzero(self.split_tags == tag.value)

    @property
    def train_indices(self) -> np.ndarray:
        return self.indices(SplitTag.TRAIN)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split_tags != SplitTag.TRAIN.value)

    @property
    def has_query_split(self) -> bool:
        return bool(np.any(self.split_tags == SplitTag.QUERY.value))


def generate_sphere_mixture(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    spread: float,
    seed: int,
    test_classes: int = 0,
) -> LabeledDataset:
    """Balanced classes scattered around seeded random unit means.

    `spread` is the expected norm of the Gaussian perturbation added to each
    mean before projecting back onto the sphere. With `test_classes` > 0 a
    class-disjoint set of extra classes is generated and tagged gallery.
    """
    if dim < 2:
        raise InvalidDimension(f"dim must be >= 2, got {dim}")
    if spread <= 0:
        raise InvalidParameter(f"spread must be positive, got {spread}")
    if num_classes < 1 or samples_per_class < 1 or test_classes < 0:
        raise InvalidParameter("class and sample counts must be positive")
    rng = np.random.default_rng(seed)
    total_classes = num_classes + test_classes
    means = l2_normalize_rows(rng.standard_normal((total_classes, dim)))
    noise = rng.standard_normal((total_classes, samples_per_class, dim)) * (spread / math.sqrt(dim))
    samples = (means[:, None, :] + noise).reshape(-1, dim)
    labels = np.repeat(np.arange(total_classes), samples_per_class)
    tags = np.where(labels < num_classes, SplitTag.TRAIN.value, SplitTag.GALLERY.value)
    return LabeledDataset(l2_normalize_rows(samples), labels, labels.copy(), tags, total_classes)


def _training_classes(ds: LabeledDataset) -> np.ndarray:
    classes = np.unique(ds.true_labels[ds.train_indices])
    if classes.size < 2:
        raise SingleClassUnsupported("label noise needs at least two training classes")
    return classes


def inject_symmetric_noise(ds: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    """Flip each training label with probability `rate` to a uniformly drawn different class."""
    classes = _training_classes(ds)
    rng = np.random.default_rng(spec.seed)
    train = ds.train_indices
    flipped = train[rng.random(train.size) < spec.rate]
    positions = np.searchsorted(classes, ds.true_labels[flipped])
    offsets = rng.integers(1, classes.size, size=flipped.size)
    train_labels = ds.train_labels.copy()
    train_labels[flipped] = classes[(positions + offsets) % classes.size]
    logger.info("Symmetric noise flipped %d of %d training labels", flipped.size, train.size)
    return replace(ds, train_labels=train_labels)


def inject_longtail_noise(ds: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    """Dissolve ceil(rate * classes) training classes into fresh small sub-cluster labels."""
    classes = _training_classes(ds)
    dissolve_count = math.ceil(spec.rate * classes.size)
    if dissolve_count == 0:
        return ds
    rng = np.random.default_rng(spec.seed)
    dissolved = np.sort(rng.choice(classes, size=dissolve_count, replace=False))
    train_labels = ds.train_labels.copy()
    train = ds.train_indices
    next_label = ds.num_classes
    for class_id in dissolved:
        members = train[ds.true_labels[train] == class_id]
        order = rng.permutation(members.size)
        train_labels[members[order]] = next_label + np.arange(members.size) % spec.longtail_subclusters
        next_label += spec.longtail_subclusters
    logger.info("Long-tail noise dissolved classes %s into %d sub-clusters", dissolved.tolist(), next_label - ds.num_classes)
    return replace(ds, train_labels=train_labels, num_classes=next_label)


def inject_noise(ds: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    if spec.kind == "symmetric":
        return inject_symmetric_noise(ds, spec)
    return inject_longtail_noise(ds, spec)


def random_batch_sampler(ds: LabeledDataset, batch_size: int, seed) -> Iterator[np.ndarray]:
    """One epoch: a seeded shuffle of the training indices, chunked; the last short batch is kept."""
    if batch_size < 1:
        raise InvalidParameter(f"batch_size must be >= 1, got {batch_size}")
    train = ds.train_indices
    if train.size == 0:
        raise EmptySplit("dataset has no training records")
    order = np.random.default_rng(seed).permutation(train)
    return iter([order[start:start + batch_size] for start in range(0, order.size, batch_size)])


def _stratified_tags(labels: np.ndarray, fraction: float, rng: np.random.Generator, first: str, second: str) -> np.ndarray:
    tags = np.full(labels.shape, second, dtype=object)
    for class_id in np.unique(labels):
        members = np.flatnonzero(labels == class_id)
        if members.size < 2:
            continue
        take = min(max(int(round(fraction * members.size)), 1), members.size - 1)
        tags[rng.permutation(members)[:take]] = first
    return tags


def split_query_gallery(ds: LabeledDataset, fraction_query: float, seed: int) -> LabeledDataset:
    """Tag the non-training records query/gallery by a seeded per-class stratified draw."""
    if not 0.0 < fraction_query < 1.0:
        raise InvalidParameter(f"fraction_query must lie in (0, 1), got {fraction_query}")
    test = ds.test_indices
    if test.size < 2:
        raise InsufficientSamples("query/gallery split needs at least two test records")
    rng = np.random.default_rng(seed)
    tags = ds.split_tags.astype(object)
    tags[test] = _stratified_tags(ds.true_labels[test], fraction_query, rng, SplitTag.QUERY.value, SplitTag.GALLERY.value)
    return replace(ds, split_tags=tags.astype(str))


def holdout_split(ds: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Move a stratified fraction of the training records into the gallery for same-class evaluation."""
    if not 0.0 < fraction < 1.0:
        raise InvalidParameter(f"holdout fraction must lie in (0, 1), got {fraction}")
    train = ds.train_indices
    if train.size < 2:
        raise InsufficientSamples("holdout split needs at least two training records")
    rng = np.random.default_rng(seed)
    tags = ds.split_tags.astype(object)
    tags[train] = _stratified_tags(ds.true_labels[train], fraction, rng, SplitTag.GALLERY.value, SplitTag.TRAIN.value)
    return replace(ds, split_tags=tags.astype(str))


def subsample(ds: LabeledDataset, max_records: int, seed: int) -> LabeledDataset:
    if max_records >= len(ds):
        return ds
    keep = np.sort(np.random.default_rng(seed).permutation(len(ds))[:max_records])
    return LabeledDataset(
        ds.features[keep], ds.true_labels[keep], ds.train_labels[keep], ds.split_tags[keep], ds.num_classes
    )
