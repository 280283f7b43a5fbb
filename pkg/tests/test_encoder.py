import unittest

import numpy as np
import pytest

from app.errors import InvalidParameter, KindMismatch, ShapeMismatch, StaleCache
from app.models import OptimizerSpec
from app.services.encoder import MlpEncoder, backward, embed, forward
from app.services.numkernel import numerical_gradient, relative_error
from app.services.optimizers import (
    OptimizerKind,
    OptimizerState,
    adamw_step,
    optimizer_step,
    sgd_nesterov_step,
)


class EncoderTest(unittest.TestCase):
    def setUp(self) -> None:
        self.encoder = MlpEncoder.initialize([5, 7, 3], seed=0)
        self.batch = np.random.default_rng(1).normal(size=(4, 5))

    def test_initialization_is_seeded(self) -> None:
        again = MlpEncoder.initialize([5, 7, 3], seed=0)
        for left, right in zip(self.encoder.params, again.params):
            np.testing.assert_array_equal(left, right)
        self.assertEqual(self.encoder.param_names, ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"])

    def test_backward_matches_finite_differences(self) -> None:
        upstream = np.random.default_rng(2).normal(size=(4, 3))
        _, cache = forward(self.encoder, self.batch)
        analytic = backward(self.encoder, cache, upstream)
        params = self.encoder.params
        for index in range(len(params)):

            def projected(point: np.ndarray, index: int = index) -> float:
                trial = [p.copy() for p in params]
                trial[index] = point
                perturbed = MlpEncoder(self.encoder.layer_dims, trial[0::2], trial[1::2])
                return float(np.sum(forward(perturbed, self.batch)[0] * upstream))

            numeric = numerical_gradient(projected, params[index])
            self.assertLess(relative_error(analytic[index], numeric), 1e-6)

    def test_stale_cache_is_rejected(self) -> None:
        _, cache = forward(self.encoder, self.batch)
        self.encoder.set_params([p.copy() for p in self.encoder.params])
        with self.assertRaises(StaleCache):
            backward(self.encoder, cache, np.zeros((4, 3)))

    def test_identity_encoder_passes_features_through(self) -> None:
        identity = MlpEncoder.identity(5)
        np.testing.assert_array_equal(forward(identity, self.batch)[0], self.batch)

    def test_input_width_is_checked(self) -> None:
        with self.assertRaises(ShapeMismatch):
            forward(self.encoder, np.ones((2, 4)))

    def test_embed_matches_forward_across_chunks(self) -> None:
        features = np.random.default_rng(3).normal(size=(11, 5))
        np.testing.assert_allclose(embed(self.encoder, features, batch_size=4), forward(self.encoder, features)[0])

    def test_dead_rectifier_unit_gets_no_gradient(self) -> None:
        biases = [b.copy() for b in self.encoder.biases]
        biases[0][2] = -1e3
        encoder = MlpEncoder(self.encoder.layer_dims, [w.copy() for w in self.encoder.weights], biases)
        _, cache = forward(encoder, self.batch)
        grads = backward(encoder, cache, np.random.default_rng(4).normal(size=(4, 3)))
        np.testing.assert_array_equal(grads[0][:, 2], np.zeros(5))
        self.assertEqual(float(grads[1][2]), 0.0)
        np.testing.assert_array_equal(grads[2][2], np.zeros(3))

    def test_zero_upstream_gives_zero_gradients(self) -> None:
        _, cache = forward(self.encoder, self.batch)
        for grad, param in zip(backward(self.encoder, cache, np.zeros((4, 3))), self.encoder.params):
            self.assertEqual(grad.shape, param.shape)
            self.assertFalse(np.any(grad))


class DropoutTest(unittest.TestCase):
    def test_dropout_only_applies_in_training(self) -> None:
        encoder = MlpEncoder.initialize([4, 8, 6], seed=0, dropout_rate=0.5)
        batch = np.ones((3, 4))
        evaluated, _ = forward(encoder, batch)
        trained, cache = forward(encoder, batch, training=True, rng_seed=[0, 1, 0])
        self.assertIsNotNone(cache.dropout_mask)
        self.assertTrue(np.all((trained == 0.0) | np.isclose(trained, 2.0 * evaluated)))

    def test_same_seed_gives_same_mask(self) -> None:
        encoder = MlpEncoder.initialize([4, 8, 6], seed=0, dropout_rate=0.3)
        batch = np.ones((3, 4))
        first, _ = forward(encoder, batch, training=True, rng_seed=[1, 2, 3])
        second, _ = forward(encoder, batch, training=True, rng_seed=[1, 2, 3])
        np.testing.assert_array_equal(first, second)

    def test_inverted_dropout_keeps_the_mean(self) -> None:
        encoder = MlpEncoder.initialize([4, 8, 6], seed=0, dropout_rate=0.2)
        row = np.array([[0.5, -1.0, 2.0, 0.25]])
        evaluated, _ = forward(encoder, row)
        # one independent mask per copy of the row
        trained, _ = forward(encoder, np.repeat(row, 10_000, axis=0), training=True, rng_seed=[5, 0, 0])
        scale = float(np.abs(evaluated).max())
        np.testing.assert_allclose(trained.mean(axis=0), evaluated[0], atol=0.02 * scale)

    def test_rate_must_be_below_one(self) -> None:
        with self.assertRaises(InvalidParameter):
            MlpEncoder.initialize([4, 2], seed=0, dropout_rate=1.0)


class OptimizerTest(unittest.TestCase):
    def test_nesterov_worked_example(self) -> None:
        state = OptimizerState.sgd_nesterov(0.1, momentum=0.9, weight_decay=0.0)
        (updated,) = sgd_nesterov_step(state, [np.array([1.0])], [np.array([0.5])])
        self.assertAlmostEqual(float(updated[0]), 0.905, places=12)
        self.assertEqual(state.step_count, 1)

    def test_zero_momentum_is_plain_sgd(self) -> None:
        state = OptimizerState.sgd_nesterov(0.1, momentum=0.0, weight_decay=0.01)
        param = np.array([2.0, -1.0])
        grad = np.array([0.5, 0.25])
        (updated,) = sgd_nesterov_step(state, [param], [grad])
        np.testing.assert_allclose(updated, param - 0.1 * (grad + 0.01 * param))

    def test_adamw_first_step_moves_by_learning_rate(self) -> None:
        state = OptimizerState.adamw(learning_rate=0.01, weight_decay=0.0)
        (updated,) = adamw_step(state, [np.array([1.0, 1.0])], [np.array([3.0, -0.2])])
        np.testing.assert_allclose(updated, [0.99, 1.01], atol=1e-7)

    def test_nesterov_step_descends_a_quadratic(self) -> None:
        curvature = np.array([[3.0, 0.5], [0.5, 1.0]])
        param = np.array([1.0, -2.0])

        def objective(point: np.ndarray) -> float:
            return 0.5 * float(point @ curvature @ point)

        state = OptimizerState.sgd_nesterov(0.1, momentum=0.9, weight_decay=0.0)
        (updated,) = sgd_nesterov_step(state, [param], [curvature @ param])
        self.assertLess(objective(updated), objective(param))

    def test_adamw_with_zero_gradients_only_decays(self) -> None:
        state = OptimizerState.adamw(learning_rate=0.01, weight_decay=0.1)
        param = np.array([[1.5, -2.0], [0.0, 4.0]])
        (updated,) = adamw_step(state, [param], [np.zeros_like(param)])
        np.testing.assert_array_equal(updated, param * (1.0 - 0.01 * 0.1))

    def test_kind_mismatch(self) -> None:
        with self.assertRaises(KindMismatch):
            adamw_step(OptimizerState.sgd_nesterov(0.1), [np.zeros(1)], [np.zeros(1)])
        with self.assertRaises(KindMismatch):
            sgd_nesterov_step(OptimizerState.adamw(), [np.zeros(1)], [np.zeros(1)])

    def test_gradient_shapes_must_match(self) -> None:
        with self.assertRaises(ShapeMismatch):
            optimizer_step(OptimizerState.sgd_nesterov(0.1), [np.zeros(2)], [np.zeros(3)])


def test_optimizer_from_spec_resolves_weight_decay() -> None:
    sgd = OptimizerState.from_spec(OptimizerSpec(kind="sgd_nesterov", learning_rate=0.05))
    adam = OptimizerState.from_spec(OptimizerSpec(kind="adamw", learning_rate=0.001))
    assert sgd.kind is OptimizerKind.SGD_NESTEROV and sgd.weight_decay == 0.0005
    assert adam.kind is OptimizerKind.ADAMW and adam.weight_decay == 0.01


def test_learning_rate_must_be_positive() -> None:
    with pytest.raises(InvalidParameter):
        OptimizerState.sgd_nesterov(0.0)
