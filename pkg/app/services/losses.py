"""Center contrastive loss and the losses it is compared against.

Every loss takes raw (unnormalized) embeddings and returns the batch-mean value
together with analytic gradients. Center-based losses normalize both the
embeddings and the centers, so their gradients are taken through the
normalization maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from app.errors import (
    DimensionMismatch,
    IndexOutOfRange,
    LabelOutOfRange,
    NonPositiveTemperature,
    NotUnitNorm,
    ShapeMismatch,
    SingleClassUnsupported,
)
from app.models import MarginConfig
from app.services.numkernel import (
    DenseMatrix,
    FloatArray,
    Vector,
    as_matrix,
    as_vector,
    l2_normalize_rows,
    log_sum_exp,
    normalize_backward_rows,
    softmax_rows,
)

UNIT_TOLERANCE = 1e-9


@dataclass
class LossOutput:
    value: float
    per_sample_values: Vector
    grad_raw_embeddings: DenseMatrix
    grad_centers: DenseMatrix | None = None
    # share of grad_centers produced by the center constraint alone
    grad_centers_center_term: DenseMatrix | None = None
    # per-sample dL/dS(x, c_j) with S = s * c^T x, not batch-averaged
    grad_similarities: DenseMatrix | None = None
    extra_grads: dict[str, FloatArray] = field(default_factory=dict)


@dataclass
class LinearClassifier:
    W: DenseMatrix
    b: Vector

    @classmethod
    def initialize(cls, num_classes: int, dim: int, seed: int) -> "LinearClassifier":
        rng = np.random.default_rng(seed)
        weights = rng.standard_normal((num_classes, dim)) / np.sqrt(dim)
        return cls(W=weights, b=np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return int(self.W.shape[0])

    def logits(self, raw_embeddings: DenseMatrix) -> DenseMatrix:
        if raw_embeddings.shape[1] != self.W.shape[1]:
            raise DimensionMismatch(f"classifier expects {self.W.shape[1]}-dim inputs, got {raw_embeddings.shape[1]}")
        if self.b.shape != (self.W.shape[0],):
            raise ShapeMismatch(f"bias shape {self.b.shape} does not match {self.W.shape[0]} classes")
        return raw_embeddings @ self.W.T + self.b


def _labels(labels, batch_size: int, num_classes: int) -> np.ndarray:
    label_array = np.asarray(labels)
    if label_array.shape != (batch_size,):
        raise ShapeMismatch(f"expected {batch_size} labels, got shape {label_array.shape}")
    label_array = label_array.astype(np.int64)
    bad = np.flatnonzero((label_array < 0) | (label_array >= num_classes))
    if bad.size:
        raise LabelOutOfRange(f"label {int(label_array[bad[0]])} at row {int(bad[0])} is outside [0, {num_classes})")
    return label_array


def _one_hot(labels: np.ndarray, num_classes: int) -> DenseMatrix:
    targets = np.zeros((labels.shape[0], num_classes))
    targets[np.arange(labels.shape[0]), labels] = 1.0
    return targets


def _smoothed_targets(labels: np.ndarray, num_classes: int, epsilon: float) -> DenseMatrix:
    if epsilon == 0.0 or num_classes == 1:
        return _one_hot(labels, num_classes)
    targets = np.full((labels.shape[0], num_classes), epsilon / (num_classes - 1))
    targets[np.arange(labels.shape[0]), labels] = 1.0 - epsilon
    return targets


@dataclass
class _CosineBatch:
    raw_embeddings: DenseMatrix
    raw_centers: DenseMatrix
    x: DenseMatrix
    c: DenseMatrix
    u: DenseMatrix
    labels: np.ndarray

    @property
    def rows(self) -> np.ndarray:
        return np.arange(self.u.shape[0])

    @property
    def positive(self) -> Vector:
        return self.u[self.rows, self.labels]


def _cosine_batch(raw_embeddings, labels, raw_centers) -> _CosineBatch:
    raw_e = as_matrix(raw_embeddings, "raw_embeddings")
    raw_c = as_matrix(raw_centers, "raw_centers")
    if raw_e.shape[0] < 1:
        raise ShapeMismatch("batch must hold at least one embedding")
    if raw_e.shape[1] != raw_c.shape[1]:
        raise DimensionMismatch(f"embeddings are {raw_e.shape[1]}-dim but centers are {raw_c.shape[1]}-dim")
    label_array = _labels(labels, raw_e.shape[0], raw_c.shape[0])
    x = l2_normalize_rows(raw_e)
    c = l2_normalize_rows(raw_c)
    return _CosineBatch(raw_e, raw_c, x, c, x @ c.T, label_array)


def _backprop_cosines(batch: _CosineBatch, grad_u: DenseMatrix) -> tuple[DenseMatrix, DenseMatrix]:
    grad_x = grad_u @ batch.c
    grad_c = grad_u.T @ batch.x
    return (
        normalize_backward_rows(batch.raw_embeddings, grad_x),
        normalize_backward_rows(batch.raw_centers, grad_c),
    )


def _center_only_grad(batch: _CosineBatch, grad_u_center: DenseMatrix) -> DenseMatrix:
    return normalize_backward_rows(batch.raw_centers, grad_u_center.T @ batch.x)


def infonce(query, contrast_set, positive_index: int, tau: float) -> LossOutput:
    """InfoNCE for one query against a contrast set.

    Gradients are taken with respect to the given vectors directly; the query
    gradient is returned as a 1 x d `grad_raw_embeddings` and the contrast-row
    gradients as `grad_centers`.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    q = as_vector(query, "query")
    keys = as_matrix(contrast_set, "contrast_set")
    if keys.shape[1] != q.shape[0]:
        raise DimensionMismatch(f"query is {q.shape[0]}-dim but contrast rows are {keys.shape[1]}-dim")
    if not 0 <= positive_index < keys.shape[0]:
        raise IndexOutOfRange(f"positive_index {positive_index} outside [0, {keys.shape[0]})")

    logits = keys @ q / tau
    lse = log_sum_exp(logits)
    value = lse - logits[positive_index]
    grad_logits = np.exp(logits - lse)
    grad_logits[positive_index] -= 1.0
    grad_query = grad_logits @ keys / tau
    grad_keys = np.outer(grad_logits, q) / tau
    return LossOutput(
        value=float(value),
        per_sample_values=np.array([value]),
        grad_raw_embeddings=grad_query[None, :],
        grad_centers=grad_keys,
        grad_similarities=grad_logits[None, :],
    )


def batch_infonce(raw_embeddings, labels, tau: float) -> LossOutput:
    """InfoNCE where each sample queries the rest of the batch and every same-label sample is a positive."""
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    raw_e = as_matrix(raw_embeddings, "raw_embeddings")
    batch_size = raw_e.shape[0]
    label_array = np.asarray(labels).astype(np.int64)
    if label_array.shape != (batch_size,):
        raise ShapeMismatch(f"expected {batch_size} labels, got shape {label_array.shape}")
    x = l2_normalize_rows(raw_e)

    logits = x @ x.T / tau
    np.fill_diagonal(logits, -np.inf)
    positives = (label_array[:, None] == label_array[None, :]).astype(np.float64)
    np.fill_diagonal(positives, 0.0)
    counts = positives.sum(axis=1)
    valid = counts > 0

    per_sample = np.zeros(batch_size)
    grad_logits = np.zeros((batch_size, batch_size))
    if np.any(valid):
        lse = log_sum_exp(logits[valid], axis=1)
        finite_logits = np.where(np.isfinite(logits[valid]), logits[valid], 0.0)
        weights = positives[valid] / counts[valid][:, None]
        per_sample[valid] = lse - np.sum(weights * finite_logits, axis=1)
        probabilities = np.exp(logits[valid] - lse[:, None])
        grad_logits[valid] = probabilities - weights

    grad_logits /= batch_size
    grad_x = (grad_logits + grad_logits.T) @ x / tau
    return LossOutput(
        value=float(np.mean(per_sample)),
        per_sample_values=per_sample,
        grad_raw_embeddings=normalize_backward_rows(raw_e, grad_x),
    )


def ccl(raw_embeddings, labels, raw_centers, cfg: MarginConfig) -> LossOutput:
    """Center contrastive loss: margin contrast against the center bank plus the 2*lambda*c_y^T x pull."""
    batch = _cosine_batch(raw_embeddings, labels, raw_centers)
    batch_size, num_classes = batch.u.shape
    rows = batch.rows

    z = cfg.s * batch.u
    z[rows, batch.labels] -= cfg.s * cfg.m
    lse = log_sum_exp(z, axis=1)
    targets = _smoothed_targets(batch.labels, num_classes, cfg.epsilon)
    contrast = np.sum(targets * (lse[:, None] - z), axis=1)
    per_sample = contrast - 2.0 * cfg.lambda_ * batch.positive

    grad_z = softmax_rows(z) - targets
    grad_similarities = grad_z.copy()
    grad_similarities[rows, batch.labels] -= 2.0 * cfg.lambda_ / cfg.s

    grad_u = cfg.s * grad_similarities / batch_size
    grad_u_center = np.zeros_like(grad_u)
    grad_u_center[rows, batch.labels] = -2.0 * cfg.lambda_ / batch_size

    grad_raw_e, grad_raw_c = _backprop_cosines(batch, grad_u)
    return LossOutput(
        value=float(np.mean(per_sample)),
        per_sample_values=per_sample,
        grad_raw_embeddings=grad_raw_e,
        grad_centers=grad_raw_c,
        grad_centers_center_term=_center_only_grad(batch, grad_u_center),
        grad_similarities=grad_similarities,
    )


def center_term(x, c) -> float:
    """||x - c||^2 for unit vectors; equals 2 - 2 c^T x."""
    xv = as_vector(x, "x")
    cv = as_vector(c, "c")
    if xv.shape != cv.shape:
        raise DimensionMismatch(f"x {xv.shape} and c {cv.shape} differ")
    for name, vector in (("x", xv), ("c", cv)):
        if abs(float(np.sqrt(vector @ vector)) - 1.0) > UNIT_TOLERANCE:
            raise NotUnitNorm(f"{name} must have unit norm")
    difference = xv - cv
    return float(difference @ difference)


def center_term_gradient(x, c) -> Vector:
    """Gradient of ||x - c||^2 with respect to c."""
    return -2.0 * (as_vector(x, "x") - as_vector(c, "c"))


def cross_entropy_linear(raw_embeddings, labels, clf: LinearClassifier) -> LossOutput:
    raw_e = as_matrix(raw_embeddings, "raw_embeddings")
    batch_size = raw_e.shape[0]
    label_array = _labels(labels, batch_size, clf.num_classes)
    z = clf.logits(raw_e)
    rows = np.arange(batch_size)
    lse = log_sum_exp(z, axis=1)
    per_sample = lse - z[rows, label_array]

    grad_z = softmax_rows(z) - _one_hot(label_array, clf.num_classes)
    grad_scaled = grad_z / batch_size
    return LossOutput(
        value=float(np.mean(per_sample)),
        per_sample_values=per_sample,
        grad_raw_embeddings=grad_scaled @ clf.W,
        grad_similarities=grad_z,
        extra_grads={"W": grad_scaled.T @ raw_e, "b": grad_scaled.sum(axis=0)},
    )


def center_loss_joint(raw_embeddings, labels, clf: LinearClassifier, centers_unnormalized, lambda_: float) -> LossOutput:
    """Cross-entropy plus lambda * ||x~ - c_y||^2 measured on unnormalized vectors."""
    raw_e = as_matrix(raw_embeddings, "raw_embeddings")
    centers = as_matrix(centers_unnormalized, "centers_unnormalized")
    if centers.shape != (clf.num_classes, raw_e.shape[1]):
        raise ShapeMismatch(f"centers shape {centers.shape} does not match ({clf.num_classes}, {raw_e.shape[1]})")
    base = cross_entropy_linear(raw_e, labels, clf)
    label_array = np.asarray(labels).astype(np.int64)
    batch_size = raw_e.shape[0]

    offsets = raw_e - centers[label_array]
    distances = np.einsum("ij,ij->i", offsets, offsets)
    per_sample = base.per_sample_values + lambda_ * distances

    pull = 2.0 * lambda_ * offsets / batch_size
    grad_centers = np.zeros_like(centers)
    np.add.at(grad_centers, label_array, -pull)
    return LossOutput(
        value=float(np.mean(per_sample)),
        per_sample_values=per_sample,
        grad_raw_embeddings=base.grad_raw_embeddings + pull,
        grad_centers=grad_centers,
        grad_centers_center_term=grad_centers.copy(),
        grad_similarities=base.grad_similarities,
        extra_grads=base.extra_grads,
    )


def nsoftmax(raw_embeddings, labels, raw_centers, s: float) -> LossOutput:
    if s <= 0:
        raise NonPositiveTemperature(f"radius s must be positive, got {s}")
    batch = _cosine_batch(raw_embeddings, labels, raw_centers)
    batch_size, num_classes = batch.u.shape
    z = s * batch.u
    per_sample = log_sum_exp(z, axis=1) - z[batch.rows, batch.labels]
    grad_similarities = softmax_rows(z) - _one_hot(batch.labels, num_classes)
    grad_raw_e, grad_raw_c = _backprop_cosines(batch, s * grad_similarities / batch_size)
    return LossOutput(
        value=float(np.mean(per_sample)),
        per_sample_values=per_sample,
        grad_raw_embeddings=grad_raw_e,
        grad_centers=grad_raw_c,
        grad_centers_center_term=np.zeros_like(grad_raw_c),
        grad_similarities=grad_similarities,
    )


def proxynca(raw_embeddings, labels, raw_centers, s: float) -> LossOutput:
    """ProxyNCA: the positive center is left out of the denominator, so values may be negative."""
    if s <= 0:
        raise NonPositiveTemperature(f"radius s must be positive, got {s}")
    batch = _cosine_batch(raw_embeddings, labels, raw_centers)
    batch_size, num_classes = batch.u.shape
    if num_classes < 2:
        raise SingleClassUnsupported("ProxyNCA needs at least one negative center")
    rows = batch.rows
    z = s * batch.u
    negatives = z.copy()
    negatives[rows, batch.labels] = -np.inf
    lse = log_sum_exp(negatives, axis=1)
    per_sample = lse - z[rows, batch.labels]

    grad_similarities = np.exp(negatives - lse[:, None])
    grad_similarities[rows, batch.labels] = -1.0
    grad_raw_e, grad_raw_c = _backprop_cosines(batch, s * grad_similarities / batch_size)
    return LossOutput(
        value=float(np.mean(per_sample)),
        per_sample_values=per_sample,
        grad_raw_embeddings=grad_raw_e,
        grad_centers=grad_raw_c,
        grad_centers_center_term=np.zeros_like(grad_raw_c),
        grad_similarities=grad_similarities,
    )


def margin_deltas(raw_embeddings, labels, raw_centers, s: float, m: float) -> DenseMatrix:
    """Delta_j = S(x, c_j) - S(x, c_y) + s*m for j != y, with 0 in the positive slot."""
    batch = _cosine_batch(raw_embeddings, labels, raw_centers)
    return _margin_deltas(batch, s, m)


def _margin_deltas(batch: _CosineBatch, s: float, m: float) -> DenseMatrix:
    deltas = s * batch.u - s * batch.positive[:, None] + s * m
    deltas[batch.rows, batch.labels] = 0.0
    return deltas


def margin_contrastive(raw_embeddings, labels, raw_centers, s: float, m: float) -> LossOutput:
    """log(1 + sum_{j != y} exp(Delta_j)), the large-margin contrastive form."""
    if s <= 0:
        raise NonPositiveTemperature(f"radius s must be positive, got {s}")
    batch = _cosine_batch(raw_embeddings, labels, raw_centers)
    batch_size = batch.u.shape[0]
    rows = batch.rows
    deltas = _margin_deltas(batch, s, m)
    lse = log_sum_exp(deltas, axis=1)

    weights = np.exp(deltas - lse[:, None])
    grad_similarities = weights.copy()
    grad_similarities[rows, batch.labels] = weights[rows, batch.labels] - 1.0
    grad_raw_e, grad_raw_c = _backprop_cosines(batch, s * grad_similarities / batch_size)
    return LossOutput(
        value=float(np.mean(lse)),
        per_sample_values=lse,
        grad_raw_embeddings=grad_raw_e,
        grad_centers=grad_raw_c,
        grad_centers_center_term=np.zeros_like(grad_raw_c),
        grad_similarities=grad_similarities,
    )


def contrast_positive_gradient(x, centers, label: int, s: float) -> float:
    """dL/dS(x, c_y) of the plain contrast loss: -sum e^Delta / (1 + sum e^Delta), always in (-1, 0)."""
    xv = as_vector(x, "x")
    cm = as_matrix(centers, "centers")
    if not 0 <= label < cm.shape[0]:
        raise LabelOutOfRange(f"label {label} outside [0, {cm.shape[0]})")
    if cm.shape[0] == 1:
        return 0.0
    similarities = s * (cm @ xv)
    deltas = np.delete(similarities - similarities[label], label)
    log_numerator = log_sum_exp(deltas)
    log_denominator = log_sum_exp(np.concatenate([[0.0], deltas]))
    return -float(np.exp(log_numerator - log_denominator))
