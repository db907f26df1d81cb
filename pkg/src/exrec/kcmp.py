"""Knowledge concept mastery predictor.

A matrix-memory LSTM reads a student's interaction stream, with the
(possibly enhanced) student representation appended to every step's input,
and emits per-concept success probabilities after each step. It is trained
jointly with the representation enhancer.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import Catalog, Dataset, InteractionSequence, LongTailSplit, truncate_sequence
from .enhancer import EnhancerConfig, Generator, SequenceEncoder, curriculum_weight, enhancer_loss_and_grad
from .errors import ConfigError, ShapeError, StateError, TrainingError
from .tensorkit import MLSTM, Adam, Linear, ParameterSet, load_checkpoint, save_checkpoint, sigmoid

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
BATCH_SIZES = (16, 32, 64, 128)
LAMBDA_GRID = (0.1, 0.3, 0.5, 0.7, 1.0)


@dataclass
class KcmpConfig:
    hidden: int = 32
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    clip_norm: float | None = 1.0
    seed: int = 0

    def validate(self):
        if self.hidden < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("hidden, epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")


def step_inputs(seqs: Sequence[InteractionSequence], coverage: np.ndarray):
    """Per-step features and next-step targets for a padded batch.

    Features are ``[tau * a, tau * (1 - a)]`` with ``tau`` the answered
    exercise's coverage scaled to unit sum (a one-hot for single-concept
    exercises). Targets at step ``t`` are the coverage and correctness of
    step ``t + 1``.
    """
    M = coverage.shape[1]
    lengths = np.array([len(s) for s in seqs])
    T, B = int(lengths.max()), len(seqs)
    tau = coverage / coverage.sum(axis=1, keepdims=True)
    X = np.zeros((T, B, 2 * M))
    target = np.zeros((T, B, M))
    nxt = np.zeros((T, B))
    mask = np.zeros((T, B))
    pmask = np.zeros((T, B))
    for b, s in enumerate(seqs):
        n = len(s)
        t = tau[s.exercises]
        a = s.correct[:, None].astype(np.float64)
        X[:n, b, :M] = t * a
        X[:n, b, M:] = t * (1.0 - a)
        mask[:n, b] = 1.0
        if n > 1:
            target[: n - 1, b] = coverage[s.exercises[1:]]
            nxt[: n - 1, b] = s.correct[1:]
            pmask[: n - 1, b] = 1.0
    return X, mask, target, nxt, pmask, lengths


def kcmp_loss(preds, target_cov, next_correct, mask=None) -> float:
    """Mean next-answer binary cross-entropy over all valid prediction steps.

    ``preds`` are per-step concept probabilities ``(..., M)``; each step's loss
    is the BCE of the predicted probability of every concept covered by the
    next exercise against the next answer, averaged over those concepts. The
    total is divided by the number of valid steps across all students.
    """
    loss, _ = _kcmp_loss_core(preds, target_cov, next_correct, mask, grad=False)
    return loss


def _kcmp_loss_core(preds, target_cov, next_correct, mask, grad=True):
    preds = np.asarray(preds, dtype=np.float64)
    target_cov = np.asarray(target_cov, dtype=np.float64)
    if preds.shape != target_cov.shape:
        raise ShapeError(f"predictions {preds.shape} vs targets {target_cov.shape}")
    a = np.asarray(next_correct, dtype=np.float64)
    if a.shape != preds.shape[:-1]:
        raise ShapeError("next_correct must match the step dimensions of preds")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("next_correct entries must be 0 or 1")
    mask = np.ones(a.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    p = np.clip(preds, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -(a[..., None] * np.log(p) + (1.0 - a[..., None]) * np.log1p(-p))
    n_cov = np.maximum(target_cov.sum(axis=-1), 1.0)
    per_step = np.sum(bce * target_cov, axis=-1) / n_cov
    denom = max(float(mask.sum()), 1.0)
    loss = float(np.sum(per_step * mask) / denom)
    if not grad:
        return loss, None
    inside = (preds > PROB_CLAMP) & (preds < 1.0 - PROB_CLAMP)
    # gradient w.r.t. the pre-sigmoid logits
    dz = (preds - a[..., None]) * inside * target_cov / n_cov[..., None] * (mask / denom)[..., None]
    return loss, dz


def total_loss(enhancer_losses, kcmp_loss_value: float, lambda_s: float) -> float:
    if lambda_s < 0:
        raise ValueError("lambda_s must be >= 0")
    return float(lambda_s * np.sum(enhancer_losses) + kcmp_loss_value)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, total, loss_k, loss_s):
        self.rows.append((epoch, total, loss_k, loss_s))

    def column(self, name):
        j = {"epoch": 0, "loss_total": 1, "loss_k": 2, "loss_s": 3}[name]
        return np.array([r[j] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "loss_total", "loss_k", "loss_s"))
            for e, t, k, s in self.rows:
                w.writerow((e, repr(float(t)), repr(float(k)), repr(float(s))))


class MasteryPredictor:
    """Enhancer (encoder + generator) and mLSTM mastery head in one parameter set."""

    def __init__(self, catalog: Catalog, enh: EnhancerConfig | None = None, cfg: KcmpConfig | None = None):
        self.enh = enh or EnhancerConfig()
        self.cfg = cfg or KcmpConfig()
        self.enh.validate()
        self.cfg.validate()
        self.catalog = catalog
        self.coverage = np.asarray(catalog.coverage, dtype=np.float64)
        self.n_concepts = catalog.n_concepts
        rng = np.random.default_rng(self.cfg.seed)
        d = self.enh.dim
        self.params = ParameterSet()
        self.encoder = SequenceEncoder(self.params, "enhancer.encoder", len(catalog), d, self.enh.embed_dim, rng)
        self.generator = Generator(self.params, "enhancer.generator", d, rng)
        self.mlstm = MLSTM(self.params, "kcmp.mlstm", 2 * self.n_concepts + d, self.cfg.hidden, rng)
        self.head = Linear(self.params, "kcmp.head", self.cfg.hidden, self.n_concepts, rng)
        self.trained = False

    # -- representations -----------------------------------------------------

    def representation(self, seqs, active):
        """Enhanced representations ``h+`` for a batch (zeros when the enhancer is disabled)."""
        B = len(seqs)
        d = self.enh.dim
        if not self.enh.enabled:
            return np.zeros((B, d)), None
        active = np.asarray(active, dtype=bool)
        H, hcache = self.encoder.forward(seqs)
        inactive = np.flatnonzero(~active)
        hp = H.copy()
        gcache = None
        if len(inactive):
            g, gcache = self.generator.forward(H[inactive])
            hp[inactive] = g + self.enh.beta * H[inactive]
        return hp, (H, hcache, inactive, gcache)

    def _representation_backward(self, dhp, cache):
        if cache is None:
            return
        H, hcache, inactive, gcache = cache
        dH = dhp.copy()
        if len(inactive):
            dH[inactive] = self.enh.beta * dhp[inactive] + self.generator.backward(dhp[inactive], gcache)
        self.encoder.backward(dH, hcache)

    # -- mastery ---------------------------------------------------------------

    def _mastery_forward(self, seqs, hp):
        X, mask, target, nxt, pmask, lengths = step_inputs(seqs, self.coverage)
        T = X.shape[0]
        Xc = np.concatenate([X, np.broadcast_to(hp[None], (T,) + hp.shape)], axis=-1)
        out, mcache = self.mlstm.forward(Xc, mask)
        z, hcache = self.head.forward(out)
        y = sigmoid(z)
        return y, (mcache, hcache, target, nxt, pmask, mask, lengths)

    def _mastery_backward(self, dz, cache):
        mcache, hcache = cache[0], cache[1]
        dout = self.head.backward(dz, hcache)
        dXc = self.mlstm.backward(dout, mcache)
        return dXc[..., 2 * self.n_concepts :].sum(axis=0)

    def batch_loss(
        self, seqs, active, epoch_frac=None, length_range=None, lambda_s=None, backward=True, enhancer_target=None
    ):
        """Joint loss on one batch; accumulates gradients when ``backward``.

        Returns ``(total, loss_k, loss_s)``. ``epoch_frac`` is ``(epo, epo_max)``.
        The enhancer target is the full-history encoding with gradients
        blocked; ``enhancer_target`` overrides it (rows for the active students), which
        lets finite-difference checks hold it fixed too.
        """
        lam = self.enh.lambda_s if lambda_s is None else lambda_s
        active = np.asarray(active, dtype=bool)
        hp, rcache = self.representation(seqs, active)
        y, cache = self._mastery_forward(seqs, hp)
        target, nxt, pmask = cache[2], cache[3], cache[4]
        loss_k, dz = _kcmp_loss_core(y, target, nxt, pmask, grad=backward)
        loss_s = 0.0
        act = np.flatnonzero(active)
        use_enh = self.enh.enabled and lam > 0 and len(act) > 0
        if use_enh:
            H_act = rcache[0][act] if enhancer_target is None else np.asarray(enhancer_target, dtype=np.float64)
            trunc = [truncate_sequence(seqs[j], self.enh.truncation) for j in act]
            R, tcache = self.encoder.forward(trunc)
            if epoch_frac is None:
                w = np.ones(len(act))
            else:
                epo, epo_max = epoch_frac
                lmin, lmax = length_range
                w = np.array([curriculum_weight(epo, epo_max, len(seqs[j]), lmin, lmax) for j in act])
            loss_s, dR = enhancer_loss_and_grad(H_act, R, self.generator, w, backward=backward, scale=lam)
            if backward:
                self.encoder.backward(dR, tcache)
        if backward:
            dhp = self._mastery_backward(dz, cache)
            self._representation_backward(dhp, rcache)
        return total_loss([loss_s], loss_k, lam if use_enh else 0.0), loss_k, loss_s

    # -- inference ---------------------------------------------------------------

    def predict_steps(self, seqs, active, context_seqs=None, batch_size=16):
        """Per-step mastery ``(T_i, M)`` for each sequence.

        ``context_seqs`` supplies the histories used for the student
        representation (defaults to ``seqs`` themselves).
        """
        context_seqs = seqs if context_seqs is None else context_seqs
        active = np.asarray(active, dtype=bool)
        order = np.argsort([len(s) for s in seqs], kind="stable")
        out = [None] * len(seqs)
        for start in range(0, len(seqs), batch_size):
            idx = order[start : start + batch_size]
            hp, _ = self.representation([context_seqs[j] for j in idx], active[idx])
            y, cache = self._mastery_forward([seqs[j] for j in idx], hp)
            for b, j in enumerate(idx):
                out[j] = y[: len(seqs[j]), b].copy()
        return out

    def predict_mastery_batch(self, seqs, active, context_seqs=None) -> np.ndarray:
        steps = self.predict_steps(seqs, active, context_seqs)
        return np.stack([s[-1] for s in steps])

    def predict_mastery(self, seq: InteractionSequence, is_active: bool) -> np.ndarray:
        return self.predict_mastery_batch([seq], [is_active])[0]

    def mastery_from_context(self, h_plus, history: InteractionSequence) -> np.ndarray:
        h_plus = np.atleast_2d(np.asarray(h_plus, dtype=np.float64))
        if h_plus.shape != (1, self.enh.dim):
            raise ShapeError(f"h_plus must have dimension {self.enh.dim}")
        y, _ = self._mastery_forward([history], h_plus)
        return y[len(history) - 1, 0].copy()

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, self.params)

    def load(self, path):
        self.params.load_state(load_checkpoint(path))
        self.trained = True


def predict_mastery(model: MasteryPredictor, h_plus, history: InteractionSequence) -> np.ndarray:
    """Mastery vector after ``history`` with an explicit student representation."""
    return model.mastery_from_context(h_plus, history)


def length_buckets(lengths, batch_size, rng):
    """Length-sorted chunks in shuffled order; keeps padding small."""
    order = np.lexsort((np.arange(len(lengths)), np.asarray(lengths)))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [chunks[i] for i in rng.permutation(len(chunks))]


def train_kcmp(
    train: Dataset,
    split: LongTailSplit,
    enh: EnhancerConfig | None = None,
    cfg: KcmpConfig | None = None,
    callback=None,
) -> tuple[MasteryPredictor, TrainingLog]:
    """Minimise ``lambda_s * sum_active L_s + L_K`` by mini-batch Adam."""
    model = MasteryPredictor(train.catalog, enh, cfg)
    cfg, enh = model.cfg, model.enh
    sids = train.student_ids
    seqs = [train.students[s] for s in sids]
    active = np.array([split.is_active(s) for s in sids])
    lengths = np.array([len(s) for s in seqs])
    lrange = (int(lengths.min()), int(lengths.max()))
    epo_max = enh.epo_max if enh.epo_max is not None else max(cfg.epochs - 1, 1)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(model.params, lr=cfg.learning_rate, clip_norm=cfg.clip_norm)
    history = TrainingLog()
    for epoch in range(cfg.epochs):
        tot = k_sum = s_sum = 0.0
        n_steps = 0
        for idx in length_buckets(lengths, cfg.batch_size, rng):
            model.params.zero_grad()
            batch = [seqs[j] for j in idx]
            t, k, s = model.batch_loss(batch, active[idx], (min(epoch, epo_max), epo_max), lrange)
            if not np.isfinite(t):
                err = TrainingError("loss is not finite", epoch=epoch)
                err.log = history
                raise err
            opt.step()
            steps = float(sum(max(len(b) - 1, 0) for b in batch))
            k_sum += k * steps
            n_steps += steps
            s_sum += s
            tot += t
        loss_k = k_sum / max(n_steps, 1.0)
        loss_total = enh.lambda_s * s_sum + loss_k if enh.enabled else loss_k
        history.add(epoch, loss_total, loss_k, s_sum)
        log.debug("kcmp epoch %d loss_k=%.5f loss_s=%.5f", epoch, loss_k, s_sum)
        if callback is not None:
            callback(epoch, model)
    model.trained = True
    return model, history
