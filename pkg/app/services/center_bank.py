from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from app.errors import CoincidentVectors, InvalidDimension, InvalidParameter, LabelOutOfRange, ModeMismatch, ShapeMismatch
from app.services.losses import center_term_gradient
from app.services.numkernel import DenseMatrix, NORM_FLOOR, Vector, as_matrix, as_vector, l2_normalize_rows


class CenterMode(str, Enum):
    GRADIENT = "gradient"
    STOPGRAD = "stopgrad"
    MOMENTUM = "momentum"


@dataclass(frozen=True, eq=False)
class CenterBank:
    raw_centers: DenseMatrix
    mode: CenterMode = CenterMode.GRADIENT
    mu: float | None = None
    renormalize: bool = False

    def __post_init__(self) -> None:
        centers = as_matrix(self.raw_centers, "raw_centers")
        if centers.shape[0] < 1:
            raise InvalidDimension("a center bank needs at least one class")
        l2_normalize_rows(centers)
        if self.mu is not None and not 0.0 <= self.mu <= 1.0:
            raise InvalidParameter(f"momentum coefficient mu must lie in [0, 1], got {self.mu}")
        object.__setattr__(self, "raw_centers", centers)

    @property
    def num_classes(self) -> int:
        return int(self.raw_centers.shape[0])

    @property
    def dim(self) -> int:
        return int(self.raw_centers.shape[1])

    def snapshot(self) -> DenseMatrix:
        return self.raw_centers.copy()


@dataclass(frozen=True, eq=False)
class CenterUpdate:
    grad_centers: DenseMatrix
    batch_embeddings: DenseMatrix
    batch_labels: np.ndarray
    grad_centers_center_term: DenseMatrix | None = None


def init_centers(
    num_classes: int,
    dim: int,
    seed: int,
    mode: CenterMode = CenterMode.GRADIENT,
    mu: float | None = None,
    renormalize: bool = False,
) -> CenterBank:
    if num_classes < 1:
        raise InvalidDimension(f"num_classes must be >= 1, got {num_classes}")
    if dim < 2:
        raise InvalidDimension(f"center dimension must be >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    centers = l2_normalize_rows(rng.standard_normal((num_classes, dim)))
    return CenterBank(raw_centers=centers, mode=CenterMode(mode), mu=mu, renormalize=renormalize)


def _require_mode(bank: CenterBank, mode: CenterMode) -> None:
    if bank.mode is not mode:
        raise ModeMismatch(f"bank is in {bank.mode.value} mode, operation needs {mode.value}")


def _step(bank: CenterBank, grad: DenseMatrix, step_size: float) -> CenterBank:
    if grad.shape != bank.raw_centers.shape:
        raise ShapeMismatch(f"center gradient shape {grad.shape} does not match bank {bank.raw_centers.shape}")
    centers = bank.raw_centers - step_size * grad
    if bank.renormalize:
        centers = l2_normalize_rows(centers)
    return replace(bank, raw_centers=centers)


def apply_gradient_mode(bank: CenterBank, update: CenterUpdate, step_size: float) -> CenterBank:
    """Plain descent step with the full center gradient; storage stays unnormalized unless renormalize is set."""
    _require_mode(bank, CenterMode.GRADIENT)
    return _step(bank, as_matrix(update.grad_centers, "grad_centers"), step_size)


def apply_stopgrad_mode(bank: CenterBank, update: CenterUpdate, step_size: float) -> CenterBank:
    """Descent step where the contrastive share of the gradient is dropped and only the center term moves centers."""
    _require_mode(bank, CenterMode.STOPGRAD)
    if update.grad_centers_center_term is None:
        raise ShapeMismatch("stop-gradient updates need the center-term gradient")
    return _step(bank, as_matrix(update.grad_centers_center_term, "grad_centers_center_term"), step_size)


def momentum_update(bank: CenterBank, batch_embeddings, batch_labels, mu: float | None = None) -> CenterBank:
    """c_y <- mu * c_y + (1 - mu) * x, applied sample by sample in batch order, then renormalized.

    A sample that cancels its center exactly (x = -c_y at mu = 0.5) leaves
    the center where it was.
    """
    _require_mode(bank, CenterMode.MOMENTUM)
    coefficient = bank.mu if mu is None else mu
    if coefficient is None or not 0.0 <= coefficient <= 1.0:
        raise InvalidParameter(f"momentum coefficient mu must lie in [0, 1], got {coefficient}")
    embeddings = as_matrix(batch_embeddings, "batch_embeddings")
    labels = np.asarray(batch_labels).astype(np.int64)
    if embeddings.shape[1] != bank.dim or labels.shape != (embeddings.shape[0],):
        raise ShapeMismatch("batch embeddings and labels do not match the bank")
    bad = np.flatnonzero((labels < 0) | (labels >= bank.num_classes))
    if bad.size:
        raise LabelOutOfRange(f"label {int(labels[bad[0]])} outside [0, {bank.num_classes})")
    if coefficient == 1.0:
        return replace(bank, mu=coefficient)

    centers = bank.raw_centers.copy()
    for x, label in zip(embeddings, labels):
        moved = coefficient * centers[label] + (1.0 - coefficient) * x
        norm = float(np.linalg.norm(moved))
        if norm > NORM_FLOOR:
            centers[label] = moved / norm
    return replace(bank, raw_centers=centers, mu=coefficient)


def direction_equivalence_check(c, x) -> float:
    """Cosine between the momentum step direction and the negative center-term gradient."""
    center = as_vector(c, "c")
    query = as_vector(x, "x")
    if float(np.linalg.norm(query - center)) <= NORM_FLOOR:
        raise CoincidentVectors("momentum and gradient directions are undefined when c equals x")
    mu = 0.5
    momentum_direction = (mu * center + (1.0 - mu) * query) - center
    descent_direction = -0.5 * center_term_gradient(query, center)
    return _cosine(momentum_direction, descent_direction)


def _cosine(a: Vector, b: Vector) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
