"""Parameter-holding layer objects wrapping :mod:`rinq.ndnn.ops`.

Weights are initialised uniformly in ``+-sqrt(1/fan_in)``; biases likewise.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, parameter


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), name)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, d_in, (d_in, d_out), "weight")
        self.bias = _uniform(rng, d_in, (d_out,), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


class Conv1d:
    def __init__(self, k: int, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.stride = stride
        self.weight = _uniform(rng, k * c_in, (k, c_in, c_out), "weight")
        self.bias = _uniform(rng, k * c_in, (c_out,), "bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.stride)


class LSTM:
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_x = _uniform(rng, hidden, (d_in, 4 * hidden), "w_x")
        self.w_h = _uniform(rng, hidden, (hidden, 4 * hidden), "w_h")
        self.bias = _uniform(rng, hidden, (4 * hidden,), "bias")

    def parameters(self):
        return [self.w_x, self.w_h, self.bias]

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.lstm_sequence(x, self.w_x, self.w_h, self.bias)


class BatchNorm:
    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(features), "gamma")
        self.beta = parameter(np.zeros(features), "beta")
        self.state = ops.BatchNormState.fresh(features, momentum, eps)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.state.running_mean, self.state.running_var]

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.state, train)
