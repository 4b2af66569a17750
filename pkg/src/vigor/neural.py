"""Small dense network kernel: linear, ReLU, sigmoid, batch norm and Adam.

Matrices are plain 2-D ``float64`` numpy arrays (row-major, one sample per
row). Layers cache what they need during ``forward`` and accumulate parameter
gradients during ``backward``; call ``zero_grad`` between steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIGMOID_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


def as_matrix(a, name: str = "input") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class Linear:
    """Affine map ``y = x W^T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 name: str = "linear"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(f"{name}.weight", glorot_uniform(rng, in_dim, out_dim))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim))
        self._input = None

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"input shape {x.shape} incompatible with weight shape {self.weight.value.shape}")
        self._input = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad_out) -> np.ndarray:
        if self._input is None:
            raise StateError("Linear.backward called before forward")
        grad_out = as_matrix(grad_out, "grad_out")
        expected = (self._input.shape[0], self.out_dim)
        if grad_out.shape != expected:
            raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
        self.weight.grad += grad_out.T @ self._input
        self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value


class ReLU:
    def __init__(self):
        self._mask = None

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_out) -> np.ndarray:
        if self._mask is None:
            raise StateError("ReLU.backward called before forward")
        return np.where(self._mask, grad_out, 0.0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid:
    def __init__(self):
        self._out = None

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x) -> np.ndarray:
        self._out = sigmoid(x)
        return self._out

    def backward(self, grad_out) -> np.ndarray:
        if self._out is None:
            raise StateError("Sigmoid.backward called before forward")
        return grad_out * self._out * (1.0 - self._out)


class BatchNorm:
    """Per-feature batch normalisation with running statistics for eval mode."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.training = True
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x, training: bool | None = None) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.dim:
            raise ShapeError(f"input shape {x.shape} incompatible with BatchNorm dim {self.dim}")
        training = self.training if training is None else training
        if training:
            n = x.shape[0]
            if n < 2:
                raise ValueError("BatchNorm in training mode needs a batch of at least 2 rows")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            # running variance uses the unbiased estimate
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * n / (n - 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._cache = (x_hat, inv_std, training)
        return self.gamma.value * x_hat + self.beta.value

    def backward(self, grad_out) -> np.ndarray:
        if self._cache is None:
            raise StateError("BatchNorm.backward called before forward")
        x_hat, inv_std, training = self._cache
        self.gamma.grad += (grad_out * x_hat).sum(axis=0)
        self.beta.grad += grad_out.sum(axis=0)
        g = grad_out * self.gamma.value
        if not training:
            return g * inv_std
        return inv_std * (g - g.mean(axis=0) - x_hat * (g * x_hat).mean(axis=0))


class Sequential:
    def __init__(self, *layers):
        self.layers = list(layers)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x, training: bool = True) -> np.ndarray:
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                x = layer.forward(x, training=training)
            else:
                x = layer.forward(x)
        return x

    def backward(self, grad_out) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


def mlp(in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator, name: str,
        batchnorm: bool = False, bn_momentum: float = 0.1, bn_eps: float = 1e-5,
        second_hidden: int | None = None) -> Sequential:
    """Linear -> ReLU [-> BatchNorm] -> Linear -> ReLU [-> Linear(out)]."""
    second_hidden = second_hidden or max(1, hidden // 2)
    layers = [Linear(in_dim, hidden, rng, f"{name}.0"), ReLU()]
    if batchnorm:
        layers.append(BatchNorm(hidden, bn_momentum, bn_eps, f"{name}.bn"))
    layers += [Linear(hidden, second_hidden, rng, f"{name}.1"), ReLU()]
    if out_dim:
        layers.append(Linear(second_hidden, out_dim, rng, f"{name}.out"))
    return Sequential(*layers)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: list[Parameter]) -> None:
    """In-place Adam update of ``params`` from their accumulated ``grad``."""
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"Adam state tracks {len(state.m)} blocks, got {len(params)}")
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter block '{p.name}'")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.value.shape:
            raise ShapeError(f"Adam moment shape {m.shape} != parameter '{p.name}' shape {p.value.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        p.value -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def flatten(params: list[Parameter]) -> np.ndarray:
    return np.concatenate([p.value.ravel() for p in params])


def flatten_grads(params: list[Parameter]) -> np.ndarray:
    return np.concatenate([p.grad.ravel() for p in params])


def unflatten(params: list[Parameter], vector) -> None:
    vector = np.asarray(vector, dtype=np.float64)
    total = sum(p.value.size for p in params)
    if vector.size != total:
        raise ShapeError(f"vector length {vector.size} != parameter count {total}")
    offset = 0
    for p in params:
        p.value[...] = vector[offset:offset + p.value.size].reshape(p.value.shape)
        offset += p.value.size
