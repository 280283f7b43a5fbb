import math
import unittest

import numpy as np
import pytest

from app.errors import (
    DimensionMismatch,
    IndexOutOfRange,
    LabelOutOfRange,
    NonPositiveTemperature,
    NotUnitNorm,
    SingleClassUnsupported,
)
from app.models import MarginConfig
from app.services.losses import (
    LinearClassifier,
    batch_infonce,
    ccl,
    center_loss_joint,
    center_term,
    contrast_positive_gradient,
    cross_entropy_linear,
    infonce,
    margin_contrastive,
    margin_deltas,
    nsoftmax,
    proxynca,
)
from app.services.numkernel import l2_normalize_rows, normalize_backward_rows, numerical_gradient, relative_error


def _instance(seed: int, batch: int | None = None, classes: int | None = None, dim: int | None = None):
    rng = np.random.default_rng(seed)
    batch = batch or int(rng.integers(1, 9))
    classes = classes or int(rng.integers(2, 7))
    dim = dim or int(rng.integers(2, 9))
    raw_e = rng.normal(size=(batch, dim))
    raw_c = rng.normal(size=(classes, dim))
    labels = rng.integers(0, classes, size=batch)
    return raw_e, labels, raw_c


def _unit(*coords: float) -> np.ndarray:
    vector = np.array(coords, dtype=np.float64)
    return vector / np.linalg.norm(vector)


class ReductionIdentityTest(unittest.TestCase):
    def test_ccl_without_center_or_margin_is_nsoftmax(self) -> None:
        cfg = MarginConfig(s=16.0, m=0.0, lambda_=0.0, epsilon=0.0)
        for seed in range(100):
            raw_e, labels, raw_c = _instance(seed)
            left = ccl(raw_e, labels, raw_c, cfg)
            right = nsoftmax(raw_e, labels, raw_c, 16.0)
            self.assertAlmostEqual(left.value, right.value, delta=1e-12)
            np.testing.assert_allclose(left.grad_raw_embeddings, right.grad_raw_embeddings, atol=1e-12)
            np.testing.assert_allclose(left.grad_centers, right.grad_centers, atol=1e-12)

    def test_ccl_without_center_term_is_margin_contrastive(self) -> None:
        for seed in range(100):
            raw_e, labels, raw_c = _instance(seed)
            m = float(np.random.default_rng(seed + 1000).uniform(0.0, 0.5))
            left = ccl(raw_e, labels, raw_c, MarginConfig(s=16.0, m=m, lambda_=0.0, epsilon=0.0))
            right = margin_contrastive(raw_e, labels, raw_c, 16.0, m)
            self.assertAlmostEqual(left.value, right.value, delta=1e-12)
            np.testing.assert_allclose(left.grad_raw_embeddings, right.grad_raw_embeddings, atol=1e-12)
            np.testing.assert_allclose(left.grad_centers, right.grad_centers, atol=1e-12)
            np.testing.assert_allclose(left.grad_similarities, right.grad_similarities, atol=1e-12)

    def test_center_loss_without_weight_is_cross_entropy(self) -> None:
        rng = np.random.default_rng(4)
        raw_e = rng.normal(size=(6, 5))
        labels = rng.integers(0, 3, size=6)
        clf = LinearClassifier.initialize(3, 5, seed=1)
        joint = center_loss_joint(raw_e, labels, clf, rng.normal(size=(3, 5)), 0.0)
        plain = cross_entropy_linear(raw_e, labels, clf)
        self.assertEqual(joint.value, plain.value)
        np.testing.assert_array_equal(joint.grad_raw_embeddings, plain.grad_raw_embeddings)

    def test_margin_contrastive_single_sample_matches_nsoftmax_at_zero_margin(self) -> None:
        raw_e, labels, raw_c = _instance(7, batch=1)
        self.assertAlmostEqual(
            margin_contrastive(raw_e, labels, raw_c, 16.0, 0.0).value,
            nsoftmax(raw_e, labels, raw_c, 16.0).value,
            delta=1e-12,
        )


class DecompositionTest(unittest.TestCase):
    def test_ccl_is_margin_loss_plus_center_term(self) -> None:
        for seed in range(100):
            raw_e, labels, raw_c = _instance(seed)
            rng = np.random.default_rng(seed + 500)
            m = float(rng.uniform(0.0, 0.5))
            lambda_ = float(rng.uniform(0.0, 2.0))
            combined = ccl(raw_e, labels, raw_c, MarginConfig(s=16.0, m=m, lambda_=lambda_, epsilon=0.0))
            margin = margin_contrastive(raw_e, labels, raw_c, 16.0, m)

            x = l2_normalize_rows(raw_e)
            c = l2_normalize_rows(raw_c)
            distances = [center_term(x[row], c[label]) for row, label in enumerate(labels)]
            expected = margin.value + lambda_ * float(np.mean(distances)) - 2.0 * lambda_
            self.assertLess(abs(combined.value - expected), 1e-10)

            pull = -2.0 * lambda_ * c[labels] / len(labels)
            expected_grad = margin.grad_raw_embeddings + normalize_backward_rows(raw_e, pull)
            self.assertLess(float(np.linalg.norm(combined.grad_raw_embeddings - expected_grad)), 1e-10)


class CenterTermTest(unittest.TestCase):
    def test_squared_distance_identity(self) -> None:
        rng = np.random.default_rng(0)
        pairs = l2_normalize_rows(rng.normal(size=(2000, 6)))
        for x, c in zip(pairs[0::2], pairs[1::2]):
            self.assertLess(abs(center_term(x, c) - (2.0 - 2.0 * float(c @ x))), 1e-12)

    def test_rejects_non_unit_inputs(self) -> None:
        with self.assertRaises(NotUnitNorm):
            center_term(np.array([2.0, 0.0]), np.array([1.0, 0.0]))

    def test_dimension_mismatch(self) -> None:
        with self.assertRaises(DimensionMismatch):
            center_term(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))

    def test_center_term_gradient_decomposition(self) -> None:
        raw_e, labels, raw_c = _instance(21, batch=5, classes=3, dim=4)
        lambda_ = 0.7
        output = ccl(raw_e, labels, raw_c, MarginConfig(s=8.0, m=0.2, lambda_=lambda_, epsilon=0.05))
        x = l2_normalize_rows(raw_e)
        grad_c = np.zeros_like(raw_c)
        for row, label in enumerate(labels):
            grad_c[label] -= 2.0 * lambda_ * x[row] / len(labels)
        expected = normalize_backward_rows(raw_c, grad_c)
        np.testing.assert_allclose(output.grad_centers_center_term, expected, atol=1e-12)

        contrast_only = ccl(raw_e, labels, raw_c, MarginConfig(s=8.0, m=0.2, lambda_=0.0, epsilon=0.05))
        np.testing.assert_allclose(
            output.grad_centers, contrast_only.grad_centers + output.grad_centers_center_term, atol=1e-12
        )


class MarginSandwichTest(unittest.TestCase):
    def test_loss_lies_between_max_delta_and_max_delta_plus_log_n(self) -> None:
        for seed in range(1000):
            raw_e, labels, raw_c = _instance(seed)
            m = float(np.random.default_rng(seed).uniform(0.0, 0.9))
            deltas = margin_deltas(raw_e, labels, raw_c, 16.0, m)
            per_sample = margin_contrastive(raw_e, labels, raw_c, 16.0, m).per_sample_values
            upper_slack = math.log(raw_c.shape[0])
            peak = deltas.max(axis=1)
            self.assertTrue(np.all(per_sample >= peak - 1e-12))
            self.assertTrue(np.all(per_sample <= peak + upper_slack + 1e-12))

    def test_positive_slot_of_deltas_is_zero(self) -> None:
        raw_e, labels, raw_c = _instance(3, batch=4, classes=3)
        deltas = margin_deltas(raw_e, labels, raw_c, 16.0, 0.2)
        np.testing.assert_array_equal(deltas[np.arange(4), labels], np.zeros(4))


class PositiveGradientTest(unittest.TestCase):
    def test_proxynca_positive_gradient_is_minus_one(self) -> None:
        for seed in range(50):
            raw_e, labels, raw_c = _instance(seed)
            output = proxynca(raw_e, labels, raw_c, 16.0)
            positive = output.grad_similarities[np.arange(len(labels)), labels]
            np.testing.assert_allclose(positive, -np.ones(len(labels)), atol=1e-12)

    def test_easy_instance_has_vanishing_positive_gradient(self) -> None:
        residual = math.sqrt(1.0 - 0.99**2 - 2 * 0.01**2)
        x = np.array([[0.99, 0.01, 0.01, residual]])
        centers = np.eye(4)[:3]
        output = ccl(x, np.array([0]), centers, MarginConfig(s=16.0))
        self.assertLess(abs(output.grad_similarities[0, 0]), 1e-3)
        self.assertLess(abs(contrast_positive_gradient(x[0], centers, 0, 16.0)), 1e-3)

    def test_hard_instance_has_saturated_positive_gradient(self) -> None:
        x = np.array([[0.01, 0.99, math.sqrt(1.0 - 0.01**2 - 0.99**2)]])
        centers = np.eye(3)[:2]
        output = ccl(x, np.array([0]), centers, MarginConfig(s=16.0))
        self.assertGreater(abs(output.grad_similarities[0, 0]), 0.999)
        self.assertGreater(abs(contrast_positive_gradient(x[0], centers, 0, 16.0)), 0.999)

    def test_contrast_gradient_stays_inside_open_interval(self) -> None:
        rng = np.random.default_rng(9)
        centers = l2_normalize_rows(rng.normal(size=(5, 4)))
        for _ in range(20):
            x = _unit(*rng.normal(size=4))
            value = contrast_positive_gradient(x, centers, 2, 4.0)
            self.assertTrue(-1.0 < value < 0.0)

    def test_contrast_gradient_grows_with_negative_mass(self) -> None:
        centers = np.eye(3)
        close = contrast_positive_gradient(_unit(1.0, 0.2, 0.0), centers, 0, 8.0)
        far = contrast_positive_gradient(_unit(1.0, 0.9, 0.0), centers, 0, 8.0)
        self.assertLess(abs(close), abs(far))


class LabelSmoothingTest(unittest.TestCase):
    def test_smoothed_loss_respects_entropy_floor(self) -> None:
        epsilon = 0.1
        for seed in range(20):
            raw_e, labels, raw_c = _instance(seed)
            classes = raw_c.shape[0]
            off = epsilon / (classes - 1)
            entropy = -(1 - epsilon) * math.log(1 - epsilon) - (classes - 1) * off * math.log(off)
            output = ccl(raw_e, labels, raw_c, MarginConfig(s=16.0, epsilon=epsilon))
            self.assertTrue(np.all(output.per_sample_values >= entropy - 1e-12))


def test_losses_are_batch_means() -> None:
    raw_e, labels, raw_c = _instance(12, batch=6, classes=4)
    output = ccl(raw_e, labels, raw_c, MarginConfig(s=16.0, m=0.1, lambda_=1.0, epsilon=0.1))
    assert output.value == pytest.approx(float(np.mean(output.per_sample_values)), abs=1e-14)


def test_ccl_embedding_gradient_matches_finite_differences() -> None:
    raw_e, labels, raw_c = _instance(5, batch=4, classes=3, dim=5)
    cfg = MarginConfig(s=16.0, m=0.1, lambda_=1.0, epsilon=0.1)
    analytic = ccl(raw_e, labels, raw_c, cfg).grad_raw_embeddings
    numeric = numerical_gradient(lambda point: ccl(point, labels, raw_c, cfg).value, raw_e)
    assert relative_error(analytic, numeric) < 1e-6


def test_cross_entropy_is_tiny_when_logits_favor_the_label() -> None:
    clf = LinearClassifier(W=np.array([[40.0, 0.0], [0.0, 0.0], [-10.0, 0.0]]), b=np.zeros(3))
    assert cross_entropy_linear(np.array([[1.0, 0.0]]), np.array([0]), clf).value < 1e-12


def test_infonce_returns_query_and_contrast_gradients() -> None:
    query = _unit(1.0, 0.5, 0.0)
    contrast = l2_normalize_rows(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    output = infonce(query, contrast, 0, tau=0.5)
    assert output.grad_raw_embeddings.shape == (1, 3)
    assert output.grad_centers.shape == (3, 3)
    numeric = numerical_gradient(lambda point: infonce(point, contrast, 0, 0.5).value, query)
    assert relative_error(output.grad_raw_embeddings[0], numeric) < 1e-6


def test_infonce_worked_example() -> None:
    output = infonce(np.array([1.0, 0.0]), np.eye(2), 0, tau=1.0)
    assert math.isclose(output.value, math.log1p(math.exp(-1.0)), abs_tol=1e-12)
    assert math.isclose(output.value, 0.3132617, abs_tol=1e-7)


def test_infonce_with_only_the_positive_is_zero() -> None:
    output = infonce(np.array([1.0, 0.0]), np.array([[1.0, 0.0]]), 0, tau=0.1)
    assert output.value == 0.0
    assert not np.any(output.grad_raw_embeddings)
    assert not np.any(output.grad_centers)


def test_infonce_rejects_bad_arguments() -> None:
    with pytest.raises(NonPositiveTemperature):
        infonce(np.ones(2), np.eye(2), 0, tau=0.0)
    with pytest.raises(IndexOutOfRange):
        infonce(np.ones(2), np.eye(2), 2, tau=1.0)


def test_batch_infonce_ignores_samples_without_positives() -> None:
    raw_e = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    output = batch_infonce(raw_e, np.array([0, 0, 1]), tau=0.5)
    assert output.per_sample_values[2] == 0.0
    assert output.per_sample_values[0] > 0.0
    numeric = numerical_gradient(lambda point: batch_infonce(point, np.array([0, 0, 1]), 0.5).value, raw_e)
    assert relative_error(output.grad_raw_embeddings, numeric) < 1e-6


def test_proxynca_needs_two_classes() -> None:
    with pytest.raises(SingleClassUnsupported):
        proxynca(np.ones((2, 3)), np.array([0, 0]), np.ones((1, 3)), 16.0)


def test_labels_outside_the_bank_are_rejected() -> None:
    with pytest.raises(LabelOutOfRange):
        nsoftmax(np.ones((2, 3)), np.array([0, 3]), np.eye(3), 16.0)


def test_nsoftmax_rejects_non_positive_radius() -> None:
    with pytest.raises(NonPositiveTemperature):
        nsoftmax(np.ones((1, 3)), np.array([0]), np.eye(3), 0.0)
