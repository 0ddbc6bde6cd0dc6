"""Parameter containers shared by the tracker and refiner, with initializers.

Initialization: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero,
norms at gamma=1/beta=0. Output projections that feed a residual stream
(attention W_O, second FFN layer, second conv layer) are zero-initialized so
an untrained network is the identity pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import AttentionParams, layer_norm, linear


def uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    def __call__(self, x) -> Tensor:
        return linear(x, self.w, self.b)


@dataclass
class Norm:
    gamma: Tensor
    beta: Tensor

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


@dataclass
class FFN:
    fc1: Linear
    fc2: Linear

    def __call__(self, x) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


@dataclass
class MLP:
    """Stack of linear layers with GELU between them (none after the last)."""

    layers: list

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ad.gelu(x)
        return x


def init_linear(rng, d_in: int, d_out: int, zero: bool = False) -> Linear:
    w = Tensor(np.zeros((d_in, d_out))) if zero else uniform(rng, (d_in, d_out), d_in)
    return Linear(w, Tensor(np.zeros(d_out)))


def init_norm(d: int) -> Norm:
    return Norm(Tensor(np.ones(d)), Tensor(np.zeros(d)))


def init_ffn(rng, d: int, hidden: int) -> FFN:
    return FFN(init_linear(rng, d, hidden), init_linear(rng, hidden, d, zero=True))


def init_mlp(rng, dims: list[int]) -> MLP:
    return MLP([init_linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])])


def init_attention(rng, d: int, num_heads: int) -> AttentionParams:
    def w():
        return uniform(rng, (d, d), d)

    def b():
        return Tensor(np.zeros(d))

    return AttentionParams(
        num_heads, w(), b(), w(), b(), w(), b(), Tensor(np.zeros((d, d))), b()
    )
