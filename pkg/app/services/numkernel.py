from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.typing import NDArray

from app.errors import DimensionMismatch, EmptyInput, InvalidParameter, NonFiniteEvaluation, ShapeMismatch, ZeroNormRow

FloatArray = NDArray[np.float64]
DenseMatrix = FloatArray
Vector = FloatArray

NORM_FLOOR = 1e-12


def as_matrix(values, name: str = "matrix") -> DenseMatrix:
    matrix = np.asarray(values, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-dimensional, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise NonFiniteEvaluation(f"{name} contains NaN or Inf entries")
    return matrix


def as_vector(values, name: str = "vector") -> Vector:
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1:
        raise ShapeMismatch(f"{name} must be 1-dimensional, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise NonFiniteEvaluation(f"{name} contains NaN or Inf entries")
    return vector


def row_norms(m: DenseMatrix) -> Vector:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def l2_normalize_rows(m: DenseMatrix) -> DenseMatrix:
    matrix = as_matrix(m)
    norms = row_norms(matrix)
    degenerate = np.flatnonzero(norms <= NORM_FLOOR)
    if degenerate.size:
        raise ZeroNormRow(int(degenerate[0]))
    return matrix / norms[:, None]


def normalize_backward(raw_row: Vector, upstream_grad: Vector) -> Vector:
    """Chain rule through x = raw / ||raw||: (I - x x^T) upstream / ||raw||."""
    raw = as_vector(raw_row, "raw_row")
    upstream = as_vector(upstream_grad, "upstream_grad")
    if raw.shape != upstream.shape:
        raise DimensionMismatch(f"raw_row {raw.shape} and upstream_grad {upstream.shape} differ")
    norm = float(np.sqrt(raw @ raw))
    if norm <= NORM_FLOOR:
        raise ZeroNormRow(0)
    direction = raw / norm
    return (upstream - direction * (direction @ upstream)) / norm


def normalize_backward_rows(raw: DenseMatrix, upstream: DenseMatrix) -> DenseMatrix:
    if raw.shape != upstream.shape:
        raise DimensionMismatch(f"raw {raw.shape} and upstream {upstream.shape} differ")
    norms = row_norms(raw)
    degenerate = np.flatnonzero(norms <= NORM_FLOOR)
    if degenerate.size:
        raise ZeroNormRow(int(degenerate[0]))
    directions = raw / norms[:, None]
    radial = np.einsum("ij,ij->i", directions, upstream)
    return (upstream - directions * radial[:, None]) / norms[:, None]


def cosine_similarity_matrix(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    left = as_matrix(a, "a")
    right = as_matrix(b, "b")
    if left.shape[1] != right.shape[1]:
        raise DimensionMismatch(f"cannot compare {left.shape[1]}-dim rows with {right.shape[1]}-dim rows")
    return left @ right.T


def log_sum_exp(v, axis: int | None = None):
    """Shift-stable log(sum(exp(v))); entries equal to -inf are treated as absent."""
    values = np.asarray(v, dtype=np.float64)
    if values.size == 0 or (axis is not None and values.shape[axis] == 0):
        raise EmptyInput("log_sum_exp needs at least one entry")
    peak = np.max(values, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        summed = np.log(np.sum(np.exp(values - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(summed.reshape(()))
    return np.squeeze(summed, axis=axis)


def softmax_rows(z: DenseMatrix) -> DenseMatrix:
    return np.exp(z - log_sum_exp(z, axis=1)[:, None])


def numerical_gradient(f: Callable[[FloatArray], float], at, h: float = 1e-5) -> FloatArray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of `at`."""
    if h <= 0:
        raise InvalidParameter("finite-difference step h must be positive")
    point = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(point)
    for index in range(point.size):
        original = point.flat[index]
        point.flat[index] = original + h
        upper = float(f(point))
        point.flat[index] = original - h
        lower = float(f(point))
        point.flat[index] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NonFiniteEvaluation(f"non-finite evaluation around coordinate {index}")
        grad.flat[index] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: FloatArray, numeric: FloatArray, floor: float = 1e-8) -> float:
    difference = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale = max(float(np.linalg.norm(analytic)) + float(np.linalg.norm(numeric)), floor)
    return difference / scale
