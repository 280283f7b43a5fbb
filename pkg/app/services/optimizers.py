from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from app.errors import InvalidParameter, KindMismatch, ShapeMismatch
from app.models import OptimizerSpec
from app.services.numkernel import FloatArray


class OptimizerKind(str, Enum):
    SGD_NESTEROV = "sgd_nesterov"
    ADAMW = "adamw"


@dataclass
class OptimizerState:
    kind: OptimizerKind
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    velocity: list[FloatArray] = field(default_factory=list)
    first_moment: list[FloatArray] = field(default_factory=list)
    second_moment: list[FloatArray] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.kind = OptimizerKind(self.kind)
        if self.learning_rate <= 0:
            raise InvalidParameter(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameter(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidParameter(f"weight_decay must be non-negative, got {self.weight_decay}")

    @classmethod
    def sgd_nesterov(cls, learning_rate: float, momentum: float = 0.9, weight_decay: float = 0.0005) -> "OptimizerState":
        return cls(OptimizerKind.SGD_NESTEROV, learning_rate, momentum=momentum, weight_decay=weight_decay)

    @classmethod
    def adamw(
        cls,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "OptimizerState":
        return cls(OptimizerKind.ADAMW, learning_rate, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)

    @classmethod
    def from_spec(cls, spec: OptimizerSpec) -> "OptimizerState":
        if spec.kind == OptimizerKind.SGD_NESTEROV.value:
            return cls.sgd_nesterov(spec.learning_rate, spec.momentum, spec.resolved_weight_decay)
        return cls.adamw(spec.learning_rate, spec.resolved_weight_decay, spec.beta1, spec.beta2, spec.eps)

    def buffers(self) -> dict[str, list[FloatArray]]:
        return {"velocity": self.velocity, "first_moment": self.first_moment, "second_moment": self.second_moment}


def _check(params: list[FloatArray], grads: list[FloatArray]) -> None:
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} parameters but {len(grads)} gradients")
    for index, (param, grad) in enumerate(zip(params, grads)):
        if param.shape != grad.shape:
            raise ShapeMismatch(f"parameter {index} has shape {param.shape} but gradient {grad.shape}")


def _ensure_buffers(buffers: list[FloatArray], params: list[FloatArray]) -> None:
    if not buffers:
        buffers.extend(np.zeros_like(param) for param in params)


def sgd_nesterov_step(state: OptimizerState, params: list[FloatArray], grads: list[FloatArray]) -> list[FloatArray]:
    """v <- mu v + g~;  p <- p - lr (g~ + mu v), with g~ = g + wd p (L2 folded into the gradient)."""
    if state.kind is not OptimizerKind.SGD_NESTEROV:
        raise KindMismatch(f"optimizer is {state.kind.value}, not sgd_nesterov")
    _check(params, grads)
    _ensure_buffers(state.velocity, params)
    updated: list[FloatArray] = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        effective = grad + state.weight_decay * param
        state.velocity[index] = state.momentum * state.velocity[index] + effective
        updated.append(param - state.learning_rate * (effective + state.momentum * state.velocity[index]))
    state.step_count += 1
    return updated


def adamw_step(state: OptimizerState, params: list[FloatArray], grads: list[FloatArray]) -> list[FloatArray]:
    """Adam with bias correction and decoupled weight decay."""
    if state.kind is not OptimizerKind.ADAMW:
        raise KindMismatch(f"optimizer is {state.kind.value}, not adamw")
    _check(params, grads)
    _ensure_buffers(state.first_moment, params)
    _ensure_buffers(state.second_moment, params)
    state.step_count += 1
    correction1 = 1.0 - state.beta1 ** state.step_count
    correction2 = 1.0 - state.beta2 ** state.step_count
    updated: list[FloatArray] = []
    for index, (param, grad) in enumerate(zip(params, grads)):
        state.first_moment[index] = state.beta1 * state.first_moment[index] + (1.0 - state.beta1) * grad
        state.second_moment[index] = state.beta2 * state.second_moment[index] + (1.0 - state.beta2) * grad * grad
        decayed = param * (1.0 - state.learning_rate * state.weight_decay)
        step = (state.first_moment[index] / correction1) / (np.sqrt(state.second_moment[index] / correction2) + state.eps)
        updated.append(decayed - state.learning_rate * step)
    return updated


def optimizer_step(state: OptimizerState, params: list[FloatArray], grads: list[FloatArray]) -> list[FloatArray]:
    if state.kind is OptimizerKind.SGD_NESTEROV:
        return sgd_nesterov_step(state, params, grads)
    return adamw_step(state, params, grads)
