"""Multilayer-perceptron embedding encoder with hand-written backpropagation.

Hidden layers use a rectifier, the output layer is linear, and dropout (when
enabled) is applied to the embedding right before the loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from app.errors import InvalidParameter, ShapeMismatch, StaleCache
from app.services.numkernel import DenseMatrix, FloatArray, Vector, as_matrix


@dataclass
class ForwardCache:
    inputs: DenseMatrix
    pre_activations: list[DenseMatrix]
    activations: list[DenseMatrix]
    dropout_mask: DenseMatrix | None
    version: int


@dataclass
class MlpEncoder:
    layer_dims: list[int]
    weights: list[DenseMatrix]
    biases: list[Vector]
    dropout_rate: float = 0.0
    version: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if len(self.layer_dims) < 2:
            raise ShapeMismatch("an encoder needs at least one layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidParameter(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatch("weights and biases do not match the layer count")
        for index, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            if self.weights[index].shape != (fan_in, fan_out) or self.biases[index].shape != (fan_out,):
                raise ShapeMismatch(f"layer {index} parameters do not chain {fan_in} -> {fan_out}")

    @classmethod
    def initialize(cls, layer_dims: list[int], seed: int, dropout_rate: float = 0.0) -> "MlpEncoder":
        rng = np.random.default_rng(seed)
        weights: list[DenseMatrix] = []
        biases: list[Vector] = []
        last = len(layer_dims) - 2
        for index, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            gain = 1.0 if index == last else 2.0
            weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases, dropout_rate)

    @classmethod
    def identity(cls, dim: int) -> "MlpEncoder":
        return cls([dim, dim], [np.eye(dim)], [np.zeros(dim)])

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def params(self) -> list[FloatArray]:
        flat: list[FloatArray] = []
        for weight, bias in zip(self.weights, self.biases):
            flat.extend([weight, bias])
        return flat

    @property
    def param_names(self) -> list[str]:
        names: list[str] = []
        for index in range(len(self.weights)):
            names.extend([f"layer{index}.weight", f"layer{index}.bias"])
        return names

    def set_params(self, params: list[FloatArray]) -> None:
        if len(params) != 2 * len(self.weights):
            raise ShapeMismatch(f"expected {2 * len(self.weights)} parameter tensors, got {len(params)}")
        for index in range(len(self.weights)):
            weight, bias = params[2 * index], params[2 * index + 1]
            if weight.shape != self.weights[index].shape or bias.shape != self.biases[index].shape:
                raise ShapeMismatch(f"layer {index} update has the wrong shape")
            self.weights[index] = np.array(weight, dtype=np.float64)
            self.biases[index] = np.array(bias, dtype=np.float64)
        self.version += 1


def forward(
    enc: MlpEncoder,
    batch,
    training: bool = False,
    rng_seed: int | list[int] | None = None,
) -> tuple[DenseMatrix, ForwardCache]:
    inputs = as_matrix(batch, "batch")
    if inputs.shape[1] != enc.input_dim:
        raise ShapeMismatch(f"encoder expects {enc.input_dim} input columns, got {inputs.shape[1]}")

    pre_activations: list[DenseMatrix] = []
    activations: list[DenseMatrix] = [inputs]
    hidden = inputs
    last = len(enc.weights) - 1
    for index, (weight, bias) in enumerate(zip(enc.weights, enc.biases)):
        pre = hidden @ weight + bias
        pre_activations.append(pre)
        hidden = pre if index == last else np.maximum(pre, 0.0)
        activations.append(hidden)

    mask = None
    embeddings = hidden
    if training and enc.dropout_rate > 0.0:
        rng = np.random.default_rng(rng_seed)
        keep = rng.random(hidden.shape) >= enc.dropout_rate
        mask = keep / (1.0 - enc.dropout_rate)
        embeddings = hidden * mask
    return embeddings, ForwardCache(inputs, pre_activations, activations, mask, enc.version)


def backward(enc: MlpEncoder, cache: ForwardCache, grad_embeddings) -> list[FloatArray]:
    """Parameter gradients in the order of `MlpEncoder.params`."""
    if cache.version != enc.version:
        raise StaleCache("forward cache was computed before the last parameter update")
    grad = as_matrix(grad_embeddings, "grad_embeddings")
    if grad.shape != cache.activations[-1].shape:
        raise ShapeMismatch(f"upstream gradient shape {grad.shape} does not match embeddings {cache.activations[-1].shape}")
    if cache.dropout_mask is not None:
        grad = grad * cache.dropout_mask

    grads: list[FloatArray] = [np.empty(0)] * (2 * len(enc.weights))
    for index in range(len(enc.weights) - 1, -1, -1):
        grads[2 * index] = cache.activations[index].T @ grad
        grads[2 * index + 1] = grad.sum(axis=0)
        if index > 0:
            grad = (grad @ enc.weights[index].T) * (cache.pre_activations[index - 1] > 0.0)
    return grads


def embed(enc: MlpEncoder, features, batch_size: int = 1024) -> DenseMatrix:
    """Eval-mode embeddings for a whole feature matrix, computed in chunks."""
    matrix = as_matrix(features, "features")
    if matrix.shape[0] == 0:
        return np.zeros((0, enc.embedding_dim))
    chunks = [forward(enc, matrix[start:start + batch_size])[0] for start in range(0, matrix.shape[0], batch_size)]
    return np.vstack(chunks)
