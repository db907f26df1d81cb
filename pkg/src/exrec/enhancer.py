"""Student representation enhancer.

An LSTM sequence encoder summarises interaction histories. A generator MLP
learns to map the encoding of an active student's most recent ``T``
interactions onto the encoding of their full history; inactive students are
then augmented with the generator's output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import InteractionSequence
from .errors import ConfigError, EmptyInputError, ShapeError
from .tensorkit import LSTM, MLP, Embedding, ParameterSet, pad_sequences


@dataclass
class EnhancerConfig:
    truncation: int = 10
    beta: float = 0.6
    lambda_s: float = 0.5
    dim: int = 32
    embed_dim: int = 16
    epo_max: int | None = None  # None: the number of training epochs
    enabled: bool = True

    def validate(self):
        if self.truncation < 1:
            raise ConfigError("truncation must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.lambda_s < 0:
            raise ConfigError("lambda_s must be >= 0")
        if self.dim < 1 or self.embed_dim < 1:
            raise ConfigError("dimensions must be positive")


class SequenceEncoder:
    """Exercise embedding plus correctness flag, fed through an LSTM; the final hidden state is the encoding."""

    def __init__(self, params: ParameterSet, name: str, n_exercises: int, dim: int, embed_dim: int, rng):
        self.dim = dim
        self.embed = Embedding(params, f"{name}.embed", n_exercises, embed_dim, rng)
        self.lstm = LSTM(params, f"{name}.lstm", embed_dim + 1, dim, rng)

    def forward(self, seqs: Sequence[InteractionSequence]):
        if not seqs:
            raise EmptyInputError("no sequences to encode")
        if any(len(s) == 0 for s in seqs):
            raise EmptyInputError("cannot encode an empty sequence")
        lengths = np.array([len(s) for s in seqs])
        T, B = int(lengths.max()), len(seqs)
        idx = np.zeros((T, B), dtype=np.int64)
        corr = np.zeros((T, B, 1))
        for b, s in enumerate(seqs):
            idx[: len(s), b] = s.exercises
            corr[: len(s), b, 0] = s.correct
        emb, ecache = self.embed.forward(idx)
        xs = np.concatenate([emb, corr], axis=-1)
        mask = (np.arange(T)[:, None] < lengths[None, :]).astype(np.float64)
        hs, _, lcache = self.lstm.forward(xs, mask)
        return hs[-1], (ecache, lcache, mask, T, B)

    def backward(self, dR, cache):
        ecache, lcache, mask, T, B = cache
        dhs = np.zeros((T, B, self.dim))
        dhs[-1] = dR
        dxs, _, _ = self.lstm.backward(dhs, lcache)
        demb = dxs[..., :-1] * mask[:, :, None]
        self.embed.backward(demb, ecache)


def encode_sequence(encoder: SequenceEncoder, seq: InteractionSequence) -> np.ndarray:
    r, _ = encoder.forward([seq])
    return r[0]


class Generator:
    """Maps a short-history encoding to an estimate of the full-history one."""

    def __init__(self, params: ParameterSet, name: str, dim: int, rng):
        self.dim = dim
        self.mlp = MLP(params, name, [dim, dim, dim], rng, "identity")

    def forward(self, r):
        return self.mlp.forward(r)

    def backward(self, dy, cache):
        return self.mlp.backward(dy, cache)

    def __call__(self, r):
        return self.mlp.forward(r)[0]


def curriculum_weight(epo: float, epo_max: float, length: float, l_min: float, l_max: float) -> float:
    """Sinusoidal loss coefficient for an active student.

    ``sin(pi/2 * (epo/epo_max + (length - l_min)/(l_max - l_min)))``, clamped to
    [0, 1]. The argument reaches pi for the longest sequence in the last epoch,
    so long sequences are down-weighted late in training.
    """
    if epo_max <= 0:
        raise ConfigError("epo_max must be positive")
    if not 0 <= epo <= epo_max:
        raise ValueError(f"epoch {epo} outside [0, {epo_max}]")
    if l_max == l_min:
        if length != l_min:
            raise ValueError("degenerate length range")
        length_term = 0.0
    else:
        if l_max < l_min:
            raise ValueError("l_max < l_min")
        length_term = (length - l_min) / (l_max - l_min)
    w = math.sin(0.5 * math.pi * (epo / epo_max + length_term))
    return min(1.0, max(0.0, w))


def enhancer_loss(h, r, generator: Generator, w) -> float:
    """``sum_s w_s * ||h_s - G(r_s)||^2`` for one student or a batch of rows."""
    loss, _ = enhancer_loss_and_grad(h, r, generator, w, backward=False)
    return loss


def enhancer_loss_and_grad(h, r, generator: Generator, w, backward: bool = True, scale: float = 1.0):
    """Loss plus gradient w.r.t. ``r``; generator grads accumulate (times ``scale``).

    ``h`` is a fixed target: no gradient is returned for it.
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    if h.shape != r.shape or h.shape[-1] != generator.dim:
        raise ShapeError(f"target {h.shape} and encoding {r.shape} must both be (B, {generator.dim})")
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (h.shape[0],))
    if np.any(w < 0):
        raise ValueError("curriculum weights must be non-negative")
    g, cache = generator.forward(r)
    diff = g - h
    loss = float(np.sum(w * np.sum(diff * diff, axis=1)))
    if not backward:
        return loss, None
    dg = 2.0 * scale * w[:, None] * diff
    dr = generator.backward(dg, cache)
    return loss, dr


def enhance_representation(h, r, generator: Generator, is_active: bool, beta: float):
    """Augmented representation: ``G(r) + beta*h`` for inactive students, ``h`` unchanged otherwise."""
    if is_active:
        return h
    return generator(np.asarray(r, dtype=np.float64)) + beta * np.asarray(h, dtype=np.float64)
