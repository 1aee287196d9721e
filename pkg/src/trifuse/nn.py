"""Shared parameter containers and initializers for the model modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import RngState, Tensor


def _identity(x):
    return x


ACTIVATIONS = {
    "gelu": T.gelu,
    "relu": T.relu,
    "tanh": T.tanh,
    "linear": _identity,
}


def activation_fn(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation '{name}'") from None


def glorot(rng: RngState, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return (rng.uniform(shape) * 2.0 - 1.0) * limit


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor | None = None

    def tensors(self):
        return (self.w,) if self.b is None else (self.w, self.b)


def init_linear(rng: RngState, fan_in: int, fan_out: int, bias: bool = True) -> LinearParams:
    w = Tensor(glorot(rng, fan_in, fan_out), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None
    return LinearParams(w, b)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    out = T.matmul(x, p.w)
    if p.b is not None:
        out = out + p.b
    return out


def linear_vec(x: Tensor, p: LinearParams) -> Tensor:
    """Apply a linear map to a 1-D vector, returning a 1-D vector."""
    out = T.vecmat(x, p.w)
    if p.b is not None:
        out = out + p.b
    return out


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def tensors(self):
        return (self.gamma, self.beta)


def init_layer_norm(width: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(width), requires_grad=True),
                           Tensor(np.zeros(width), requires_grad=True), eps)


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return T.layer_norm(x, p.gamma, p.beta, p.eps)


@dataclass
class MlpParams:
    """Two linear layers with an activation between them."""

    lin1: LinearParams
    lin2: LinearParams
    activation: str = "gelu"

    def tensors(self):
        return self.lin1.tensors() + self.lin2.tensors()


def init_mlp(rng: RngState, d_in: int, d_hidden: int, d_out: int,
             activation: str = "gelu") -> MlpParams:
    return MlpParams(init_linear(rng, d_in, d_hidden),
                     init_linear(rng, d_hidden, d_out), activation)


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    act = activation_fn(p.activation)
    return linear(act(linear(x, p.lin1)), p.lin2)


def mlp_vec(x: Tensor, p: MlpParams) -> Tensor:
    act = activation_fn(p.activation)
    return linear_vec(act(linear_vec(x, p.lin1)), p.lin2)
