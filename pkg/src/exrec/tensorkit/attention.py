from __future__ import annotations

import numpy as np

from ..errors import EmptyInputError, ShapeError
from .functional import softmax
from .params import ParameterSet


class SelfAttention:
    """Multi-head scaled dot-product self-attention over the rows of a matrix.

    Each head projects to ``ceil(dim / heads)`` features; the concatenated
    heads are mapped back to ``dim`` by an output projection, so any head
    count works with any width.
    """

    def __init__(self, params: ParameterSet, name: str, dim: int, heads: int, rng):
        if heads < 1:
            raise ValueError("heads must be >= 1")
        self.name = name
        self.dim = dim
        self.heads = heads
        self.d_head = -(-dim // heads)
        inner = heads * self.d_head
        self.Wq = params.uniform(f"{name}.Wq", (dim, inner), dim, rng)
        self.Wk = params.uniform(f"{name}.Wk", (dim, inner), dim, rng)
        self.Wv = params.uniform(f"{name}.Wv", (dim, inner), dim, rng)
        self.Wo = params.uniform(f"{name}.Wo", (inner, dim), inner, rng)
        self.bo = params.uniform(f"{name}.bo", (dim,), inner, rng)

    def _split(self, x):
        B, m, _ = x.shape
        return x.reshape(B, m, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, h, m, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, m, h * dh)

    def forward(self, X):
        """``X`` is ``(m, dim)`` or ``(B, m, dim)``; returns output and cache."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        if X.shape[1] == 0:
            raise EmptyInputError(f"{self.name}: no rows to attend over")
        if X.shape[-1] != self.dim:
            raise ShapeError(f"{self.name}: width {X.shape[-1]} != {self.dim}")
        Q = self._split(X @ self.Wq.value)
        K = self._split(X @ self.Wk.value)
        V = self._split(X @ self.Wv.value)
        scale = 1.0 / np.sqrt(self.d_head)
        A = softmax(Q @ K.transpose(0, 1, 3, 2) * scale, axis=-1)
        Z = self._merge(A @ V)
        Y = Z @ self.Wo.value + self.bo.value
        cache = (X, Q, K, V, A, Z, single)
        return (Y[0] if single else Y), cache

    @staticmethod
    def weights(cache):
        A = cache[4]
        return A[0] if cache[6] else A

    def backward(self, dY, cache):
        X, Q, K, V, A, Z, single = cache
        if single:
            dY = dY[None]
        B, m, _ = X.shape
        scale = 1.0 / np.sqrt(self.d_head)
        self.Wo.grad += Z.reshape(B * m, -1).T @ dY.reshape(B * m, -1)
        self.bo.grad += dY.reshape(B * m, -1).sum(axis=0)
        dZ = self._split(dY @ self.Wo.value.T)
        dA = dZ @ V.transpose(0, 1, 3, 2)
        dV = A.transpose(0, 1, 3, 2) @ dZ
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        X2 = X.reshape(B * m, -1)
        dX = np.zeros_like(X)
        for W, dP in ((self.Wq, dQ), (self.Wk, dK), (self.Wv, dV)):
            dP2 = self._merge(dP)
            W.grad += X2.T @ dP2.reshape(B * m, -1)
            dX += dP2 @ W.value.T
        return dX[0] if single else dX


def self_attention(attn: SelfAttention, W):
    """Return ``(output, attention_weights)`` for a single ``(m, dim)`` matrix."""
    Y, cache = attn.forward(W)
    return Y, SelfAttention.weights(cache)
