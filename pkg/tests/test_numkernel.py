import math
import unittest

import numpy as np
import pytest

from app.errors import DimensionMismatch, EmptyInput, InvalidParameter, NonFiniteEvaluation, ZeroNormRow
from app.services.numkernel import (
    cosine_similarity_matrix,
    l2_normalize_rows,
    log_sum_exp,
    normalize_backward,
    normalize_backward_rows,
    numerical_gradient,
    relative_error,
    row_norms,
    softmax_rows,
)


class NormalizationTest(unittest.TestCase):
    def test_rows_have_unit_norm(self) -> None:
        rng = np.random.default_rng(3)
        rows = l2_normalize_rows(rng.normal(size=(20, 7)) * 5.0)
        np.testing.assert_allclose(row_norms(rows), np.ones(20), atol=1e-12)

    def test_normalizing_twice_equals_once(self) -> None:
        rows = l2_normalize_rows(np.random.default_rng(8).normal(size=(30, 6)) * 3.0)
        np.testing.assert_allclose(l2_normalize_rows(rows), rows, atol=1e-12)

    def test_self_similarity_has_unit_diagonal(self) -> None:
        rows = l2_normalize_rows(np.random.default_rng(9).normal(size=(12, 5)))
        np.testing.assert_allclose(np.diag(cosine_similarity_matrix(rows, rows)), np.ones(12), atol=1e-12)

    def test_zero_row_reports_its_index(self) -> None:
        matrix = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        with self.assertRaises(ZeroNormRow) as ctx:
            l2_normalize_rows(matrix)
        self.assertEqual(ctx.exception.row, 1)

    def test_backward_matches_finite_differences(self) -> None:
        rng = np.random.default_rng(11)
        raw = rng.normal(size=5)
        upstream = rng.normal(size=5)

        def projected(point: np.ndarray) -> float:
            return float(upstream @ (point / np.linalg.norm(point)))

        numeric = numerical_gradient(projected, raw)
        self.assertLess(relative_error(normalize_backward(raw, upstream), numeric), 1e-8)

    def test_row_backward_agrees_with_single_row(self) -> None:
        rng = np.random.default_rng(5)
        raw = rng.normal(size=(4, 3))
        upstream = rng.normal(size=(4, 3))
        batched = normalize_backward_rows(raw, upstream)
        for index in range(4):
            np.testing.assert_allclose(batched[index], normalize_backward(raw[index], upstream[index]), atol=1e-14)

    def test_backward_gradient_is_orthogonal_to_the_row(self) -> None:
        raw = np.array([3.0, 4.0])
        grad = normalize_backward(raw, np.array([1.0, 2.0]))
        self.assertAlmostEqual(float(grad @ raw), 0.0, places=12)


class LogSumExpTest(unittest.TestCase):
    def test_large_inputs_do_not_overflow(self) -> None:
        self.assertAlmostEqual(log_sum_exp([1000.0, 1000.0]), 1000.0 + math.log(2.0), places=9)

    def test_negative_infinity_entries_are_absent(self) -> None:
        self.assertEqual(log_sum_exp([-np.inf, 0.0]), 0.0)

    def test_axis_reduction(self) -> None:
        values = np.array([[0.0, 0.0], [1.0, -np.inf]])
        np.testing.assert_allclose(log_sum_exp(values, axis=1), [math.log(2.0), 1.0])

    def test_shift_moves_the_result_by_the_same_amount(self) -> None:
        v = np.random.default_rng(10).normal(size=9) * 20.0
        for shift in (-500.0, -3.5, 0.0, 7.25, 800.0):
            self.assertAlmostEqual(log_sum_exp(v + shift), log_sum_exp(v) + shift, delta=1e-10)

    def test_empty_input(self) -> None:
        with self.assertRaises(EmptyInput):
            log_sum_exp([])

    def test_softmax_rows_sum_to_one(self) -> None:
        rng = np.random.default_rng(0)
        probabilities = softmax_rows(rng.normal(size=(6, 4)) * 30.0)
        np.testing.assert_allclose(probabilities.sum(axis=1), np.ones(6), atol=1e-12)


def test_numerical_gradient_of_quadratic() -> None:
    point = np.array([[1.0, -2.0], [0.5, 3.0]])
    numeric = numerical_gradient(lambda x: float(np.sum(x * x)), point)
    np.testing.assert_allclose(numeric, 2.0 * point, atol=1e-8)


def test_numerical_gradient_rejects_bad_step() -> None:
    with pytest.raises(InvalidParameter):
        numerical_gradient(lambda x: float(np.sum(x)), np.zeros(2), h=0.0)


def test_numerical_gradient_rejects_non_finite_values() -> None:
    with pytest.raises(NonFiniteEvaluation):
        numerical_gradient(lambda x: float("inf"), np.zeros(2))


def test_relative_error_is_zero_for_identical_inputs() -> None:
    values = np.array([1.0, 2.0, 3.0])
    assert relative_error(values, values.copy()) == 0.0
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_cosine_similarity_dimension_mismatch() -> None:
    with pytest.raises(DimensionMismatch):
        cosine_similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))
