"""Dense building blocks: Linear, MLP and Embedding.

Every layer reads its weights from a shared :class:`ParameterSet` and exposes
``forward(x) -> (y, cache)`` and ``backward(dy, cache) -> dx``. ``backward``
accumulates into the parameter gradient buffers.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeError
from .functional import activation_grad, apply_activation
from .params import ParameterSet

ACTIVATIONS = ("identity", "sigmoid", "softplus", "relu", "tanh")


class Linear:
    def __init__(self, params: ParameterSet, name: str, n_in: int, n_out: int, rng, bias: bool = True):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.W = params.uniform(f"{name}.W", (n_in, n_out), n_in, rng)
        self.b = params.uniform(f"{name}.b", (n_out,), n_in, rng) if bias else None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"{self.name}: expected last dim {self.n_in}, got {x.shape}")
        y = x @ self.W.value
        if self.b is not None:
            y = y + self.b.value
        return y, x

    def backward(self, dy, x):
        x2 = x.reshape(-1, self.n_in)
        d2 = dy.reshape(-1, self.n_out)
        self.W.grad += x2.T @ d2
        if self.b is not None:
            self.b.grad += d2.sum(axis=0)
        return dy @ self.W.value.T


class MLP:
    """ReLU hidden layers followed by a configurable output activation."""

    def __init__(
        self,
        params: ParameterSet,
        name: str,
        sizes: Sequence[int],
        rng,
        out_activation: str = "identity",
    ):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        if out_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {out_activation!r}")
        self.name = name
        self.sizes = tuple(sizes)
        self.out_activation = out_activation
        self.layers = [
            Linear(params, f"{name}.{i}", sizes[i], sizes[i + 1], rng) for i in range(len(sizes) - 1)
        ]

    @property
    def n_in(self):
        return self.sizes[0]

    def forward(self, x):
        caches = []
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z, c = layer.forward(h)
            act = self.out_activation if i == last else "relu"
            h = apply_activation(act, z)
            caches.append((c, z, h, act))
        return h, caches

    def backward(self, dy, caches):
        d = dy
        for layer, (c, z, h, act) in zip(reversed(self.layers), reversed(caches)):
            d = activation_grad(act, z, h, d)
            d = layer.backward(d, c)
        return d


class Embedding:
    def __init__(self, params: ParameterSet, name: str, n: int, dim: int, rng):
        self.name = name
        self.n = n
        self.dim = dim
        self.table = params.uniform(f"{name}.table", (n, dim), dim, rng)

    def forward(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return self.table.value[idx], idx

    def backward(self, dy, idx):
        np.add.at(self.table.grad, idx.reshape(-1), dy.reshape(-1, self.dim))


def mlp_forward(mlp: MLP, x):
    """Apply ``mlp`` to a single vector or a batch of row vectors."""
    y, _ = mlp.forward(x)
    return y
