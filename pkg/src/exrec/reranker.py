"""Neural re-ranking of candidate sets.

Relevance comes from a Bi-LSTM over the candidate list, where each step sees
the student representation, a learned exercise embedding and the exercise's
concept coverage. Diversity comes from probabilistic concept coverage: each
candidate's marginal diversity (the coverage lost by removing it) is weighted
per concept by a pace distribution, which is inferred by attention over
per-concept practice histories. Both parts are fused row-wise by a scoring
MLP. The probabilistic variant adds a softplus spread head, trained by
reparameterisation and read out as an upper confidence bound.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .datamodel import Catalog, InteractionSequence
from .errors import ConfigError, EmptyInputError, ShapeError, StateError, TrainingError
from .filtering import CandidateSet
from .tensorkit import (
    LSTM,
    MLP,
    Adam,
    BiLSTM,
    Embedding,
    Linear,
    ParameterSet,
    SelfAttention,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
HEAD_GRID = (2, 4, 6, 8)
MODES = ("det", "prob")
RERANK_HEADER = ("student_id", "rank", "exercise_id", "score", "mode")


# -- coverage ----------------------------------------------------------------


def _rows(C, coverage) -> np.ndarray:
    if isinstance(C, CandidateSet):
        C = C.exercises
    idx = np.asarray(list(C) if not isinstance(C, np.ndarray) else C, dtype=np.int64)
    cov = np.asarray(coverage, dtype=np.float64)
    return cov[idx].reshape(len(idx), cov.shape[1])


def _coverage_matrix(catalog_or_cov):
    return catalog_or_cov.coverage if isinstance(catalog_or_cov, Catalog) else np.asarray(catalog_or_cov)


def coverage(C, catalog) -> np.ndarray:
    """``b_k(C) = 1 - prod_{e in C} (1 - tau_e^k)``; zeros for the empty set."""
    cov = _coverage_matrix(catalog)
    tau = _rows(C, cov)
    if len(tau) == 0:
        return np.zeros(cov.shape[1])
    return 1.0 - np.prod(1.0 - tau, axis=0)


def marginal_diversity_rows(tau) -> np.ndarray:
    """``d(C_l) = b(C) - b(C without C_l)`` for every row of ``tau`` at once.

    Uses prefix and suffix products so no division by ``1 - tau`` is needed.
    """
    tau = np.asarray(tau, dtype=np.float64)
    n, M = tau.shape
    if n == 0:
        return np.zeros((0, M))
    keep = 1.0 - tau
    prefix = np.ones((n + 1, M))
    suffix = np.ones((n + 1, M))
    prefix[1:] = np.cumprod(keep, axis=0)
    suffix[:-1] = np.cumprod(keep[::-1], axis=0)[::-1]
    without = prefix[:-1] * suffix[1:]
    return without - prefix[-1]


def marginal_diversity(C, l: int, catalog) -> np.ndarray:
    """Marginal diversity of the ``l``-th (0-based) member of ``C``."""
    tau = _rows(C, _coverage_matrix(catalog))
    if not 0 <= l < len(tau):
        raise IndexError(f"position {l} outside a set of {len(tau)}")
    return marginal_diversity_rows(tau)[l]


def diversity_gain(omega, d) -> np.ndarray:
    """``omega * d`` (broadcast over candidate rows)."""
    omega = np.asarray(omega, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if omega.shape[-1] != d.shape[-1]:
        raise ShapeError(f"pace {omega.shape} and marginal diversity {d.shape} differ in M")
    return omega * d


def split_by_concept(seq: InteractionSequence, catalog) -> list[InteractionSequence]:
    """One subsequence per concept; multi-concept interactions go to each of them."""
    cov = _coverage_matrix(catalog)
    out = []
    for k in range(cov.shape[1]):
        keep = cov[seq.exercises, k] > 0
        out.append(InteractionSequence(seq.student_id, seq.exercises[keep], seq.correct[keep], seq.positions[keep]))
    return out


# -- config and inputs -----------------------------------------------------------


@dataclass
class RerankerConfig:
    q_s: int = 32
    q_e: int = 32
    q_h: int = 64
    heads: int = 4
    head_hidden: int = 32
    pace_window: int = 20  # most recent interactions per concept fed to the pace LSTM
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    clip_norm: float | None = 1.0
    train_mode: str = "prob"
    use_diversity: bool = True  # False: relevance-only variant, diversity gain zeroed
    sigma_bias: float = -3.0
    seed: int = 0

    def validate(self):
        if min(self.q_s, self.q_e, self.q_h, self.head_hidden, self.pace_window) < 1:
            raise ConfigError("reranker dimensions must be positive")
        if self.heads not in HEAD_GRID:
            raise ConfigError(f"heads must be one of {HEAD_GRID}")
        if self.train_mode not in MODES:
            raise ConfigError(f"train_mode must be one of {MODES}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")


@dataclass
class RerankInstance:
    """Everything the re-ranker needs for one student."""

    student_id: str
    h_plus: np.ndarray
    candidates: CandidateSet
    history: InteractionSequence
    labels: np.ndarray | None = None


@dataclass
class RelevanceContext:
    H: np.ndarray  # (L, 2 q_h)
    inputs: np.ndarray  # (L, q_s + q_e + M)


@dataclass
class RerankOutput:
    student_id: str
    exercises: np.ndarray  # catalog indices, best first
    scores: np.ndarray
    mode: str
    K: int
    omega: np.ndarray | None = None

    def __len__(self):
        return len(self.exercises)

    def ids(self, catalog: Catalog) -> list[str]:
        return [catalog.ids[j] for j in self.exercises]


def window_labels(candidates: CandidateSet, window: InteractionSequence) -> np.ndarray:
    """1 for candidates attempted in ``window`` and answered wrongly at least once."""
    wrong = set(window.exercises[window.correct == 0].tolist())
    return np.array([1.0 if j in wrong else 0.0 for j in candidates.exercises])


def rerank_loss(scores, labels) -> float:
    """Summed binary cross-entropy of clamped scores against 0/1 labels."""
    loss, _ = _rerank_loss_core(np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.float64))
    return loss


def _rerank_loss_core(phi, y, weight=None):
    if phi.shape != y.shape:
        raise ShapeError(f"scores {phi.shape} vs labels {y.shape}")
    w = np.ones_like(phi) if weight is None else weight
    p = np.clip(phi, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(-np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    inside = (phi > PROB_CLAMP) & (phi < 1.0 - PROB_CLAMP)
    dphi = w * inside * (p - y) / (p * (1.0 - p))
    return loss, dphi


def _pace_arrays(subs):
    """Padded ``[a, 1 - a]`` inputs for the non-empty subsequences, plus an empty-row mask."""
    plen = np.array([len(a) for a in subs])
    empty = plen == 0
    if empty.all():
        return None, None, empty
    live = [np.asarray(a) for a in subs if len(a)]
    T = int(plen.max())
    X = np.zeros((T, len(live), 2))
    for j, a in enumerate(live):
        X[: len(a), j, 0] = a
        X[: len(a), j, 1] = 1 - a
    mask = (np.arange(T)[:, None] < plen[~empty][None, :]).astype(np.float64)
    return X, mask, empty


# -- model -----------------------------------------------------------------------


class Reranker:
    """Parameters and forward/backward passes of the re-ranking network."""

    def __init__(self, catalog: Catalog, h_dim: int, cfg: RerankerConfig | None = None):
        self.cfg = cfg or RerankerConfig()
        self.cfg.validate()
        c = self.cfg
        self.catalog = catalog
        self.coverage = np.asarray(catalog.coverage, dtype=np.float64)
        self.M = catalog.n_concepts
        self.h_dim = h_dim
        rng = np.random.default_rng([c.seed, 2])
        p = self.params = ParameterSet()
        self.proj = Linear(p, "reranker.student", h_dim, c.q_s, rng)
        self.embed = Embedding(p, "reranker.exercise", len(catalog), c.q_e, rng)
        self.bilstm = BiLSTM(p, "reranker.bilstm", c.q_s + c.q_e + self.M, c.q_h, rng)
        self.pace_lstm = LSTM(p, "reranker.pace.lstm", 2, c.q_h, rng)
        self.null = p.uniform("reranker.pace.null", (c.q_h,), c.q_h, rng)
        self.attn = SelfAttention(p, "reranker.pace.attn", c.q_h, c.heads, rng)
        self.pace_mlp = MLP(p, "reranker.pace.mlp", [c.q_h, c.head_hidden, 1], rng, "sigmoid")
        width = 2 * c.q_h + self.M
        self.mu_head = MLP(p, "reranker.mu", [width, c.head_hidden, 1], rng, "sigmoid")
        self.sigma_head = MLP(p, "reranker.sigma", [width, c.head_hidden, 1], rng, "softplus")
        self.sigma_head.layers[-1].b.value[:] = c.sigma_bias
        self.trained = False

    def zero_sigma(self):
        """Collapse the spread head to ``softplus(-30) ~ 1e-13``."""
        last = self.sigma_head.layers[-1]
        last.W.value[:] = 0.0
        last.b.value[:] = -30.0

    # -- batching ----------------------------------------------------------

    def _pace_inputs(self, histories):
        win = self.cfg.pace_window
        subs = []
        for h in histories:
            subs.extend(s.correct[-win:] for s in split_by_concept(h, self.coverage))
        return _pace_arrays(subs)

    def _batch(self, instances: Sequence[RerankInstance]):
        if not instances:
            raise EmptyInputError("no instances")
        lengths = np.array([len(inst.candidates) for inst in instances])
        if np.any(lengths == 0):
            raise EmptyInputError("empty candidate set")
        B, L = len(instances), int(lengths.max())
        cand = np.zeros((L, B), dtype=np.int64)
        d = np.zeros((B, L, self.M))
        valid = np.zeros((B, L))
        for b, inst in enumerate(instances):
            n = lengths[b]
            cand[:n, b] = inst.candidates.exercises
            d[b, :n] = marginal_diversity_rows(self.coverage[inst.candidates.exercises])
            valid[b, :n] = 1.0
        hp = np.stack([np.asarray(inst.h_plus, dtype=np.float64) for inst in instances])
        if hp.shape[1] != self.h_dim:
            raise ShapeError(f"h_plus width {hp.shape[1]} != {self.h_dim}")
        pace = self._pace_inputs([inst.history for inst in instances]) if self.cfg.use_diversity else None
        return dict(hp=hp, cand=cand, lengths=lengths, d=d, valid=valid, pace=pace)

    # -- pieces --------------------------------------------------------------

    def _relevance(self, hp, cand, lengths):
        L, B = cand.shape
        xs, pc = self.proj.forward(hp)
        xe, ec = self.embed.forward(cand)
        tau = self.coverage[cand]
        E = np.concatenate([np.broadcast_to(xs[None], (L, B, xs.shape[1])), xe, tau], axis=-1)
        H, bc = self.bilstm.forward(E, lengths)
        return H, E, (pc, ec, bc, L)

    def _relevance_backward(self, dH, cache):
        pc, ec, bc, L = cache
        q_s, q_e = self.cfg.q_s, self.cfg.q_e
        dE = self.bilstm.backward(dH, bc)
        self.proj.backward(dE[..., :q_s].sum(axis=0), pc)
        self.embed.backward(dE[..., q_s : q_s + q_e], ec)

    def _pace(self, pace, B):
        X, mask, empty = pace
        W = np.broadcast_to(self.null.value, (len(empty), self.cfg.q_h)).copy()
        lc = None
        if X is not None:
            # only practised concepts go through the LSTM
            hs, _, lc = self.pace_lstm.forward(X, mask)
            W[~empty] = hs[-1]
        Y, ac = self.attn.forward(W.reshape(B, self.M, -1))
        om, oc = self.pace_mlp.forward(Y)
        return om[..., 0], (lc, ac, oc, empty)

    def _pace_backward(self, domega, cache):
        lc, ac, oc, empty = cache
        dY = self.pace_mlp.backward(domega[..., None], oc)
        dW = self.attn.backward(dY, ac).reshape(-1, self.cfg.q_h)
        self.null.grad += dW[empty].sum(axis=0)
        if lc is not None:
            T = lc[0].shape[0]
            dhs = np.zeros((T, int((~empty).sum()), self.cfg.q_h))
            dhs[-1] = dW[~empty]
            self.pace_lstm.backward(dhs, lc)

    def _heads(self, H, Delta):
        V = np.concatenate([H.transpose(1, 0, 2), Delta], axis=-1)
        mu, mc = self.mu_head.forward(V)
        sig, sc = self.sigma_head.forward(V)
        return mu[..., 0], sig[..., 0], (mc, sc)

    def _heads_backward(self, dmu, dsig, cache):
        mc, sc = cache
        dV = self.mu_head.backward(dmu[..., None], mc)
        if dsig is not None:
            dV = dV + self.sigma_head.backward(dsig[..., None], sc)
        return dV

    # -- full passes -----------------------------------------------------------

    def forward(self, batch):
        hp, cand, lengths, d = batch["hp"], batch["cand"], batch["lengths"], batch["d"]
        B = len(lengths)
        H, _, rc = self._relevance(hp, cand, lengths)
        if self.cfg.use_diversity:
            omega, pcache = self._pace(batch["pace"], B)
        else:
            omega, pcache = np.zeros((B, self.M)), None
        Delta = diversity_gain(omega[:, None, :], d)
        mu, sig, hc = self._heads(H, Delta)
        return dict(mu=mu, sigma=sig, omega=omega, Delta=Delta), (rc, pcache, hc, d)

    def backward(self, dmu, dsig, cache, domega=None):
        rc, pcache, hc, d = cache
        dV = self._heads_backward(dmu, dsig, hc)
        q2 = 2 * self.cfg.q_h
        self._relevance_backward(dV[..., :q2].transpose(1, 0, 2), rc)
        if pcache is not None:
            dom = np.sum(dV[..., q2:] * d, axis=1)
            if domega is not None:
                dom = dom + domega
            self._pace_backward(dom, pcache)

    def batch_loss(self, instances, xi=None, backward=True):
        """Mean per-student summed BCE; ``xi`` (B, L) enables the probabilistic score."""
        batch = self._batch(instances)
        out, cache = self.forward(batch)
        y = np.zeros_like(out["mu"])
        for b, inst in enumerate(instances):
            if inst.labels is None:
                raise StateError(f"instance {inst.student_id} has no labels")
            y[b, : len(inst.labels)] = inst.labels
        phi = out["mu"] if xi is None else out["mu"] + xi * out["sigma"]
        B = len(instances)
        loss, dphi = _rerank_loss_core(phi, y, batch["valid"])
        loss /= B
        if backward:
            dphi /= B
            self.backward(dphi, None if xi is None else xi * dphi, cache)
        return loss

    def scores(self, instances, mode: str = "det"):
        """Per-instance ``(mu, sigma, omega)`` arrays trimmed to each candidate list."""
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        batch = self._batch(instances)
        out, _ = self.forward(batch)
        res = []
        for b, n in enumerate(batch["lengths"]):
            res.append((out["mu"][b, :n].copy(), out["sigma"][b, :n].copy(), out["omega"][b].copy()))
        return res

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, self.params)

    def load(self, path):
        self.params.load_state(load_checkpoint(path))
        self.trained = True


# -- single-student functional views ----------------------------------------------


def relevance_context(model: Reranker, h_plus, candidates: CandidateSet) -> RelevanceContext:
    if len(candidates) == 0:
        raise EmptyInputError("empty candidate set")
    hp = np.atleast_2d(np.asarray(h_plus, dtype=np.float64))
    if hp.shape != (1, model.h_dim):
        raise ShapeError(f"h_plus must have width {model.h_dim}")
    cand = np.asarray(candidates.exercises, dtype=np.int64)[:, None]
    H, E, _ = model._relevance(hp, cand, np.array([len(cand)]))
    return RelevanceContext(H[:, 0].copy(), E[:, 0].copy())


def pace_distribution(model: Reranker, per_concept: Sequence[InteractionSequence]) -> np.ndarray:
    """Pace distribution from per-concept subsequences (as from :func:`split_by_concept`)."""
    if len(per_concept) != model.M:
        raise ShapeError(f"expected {model.M} concept sequences, got {len(per_concept)}")
    win = model.cfg.pace_window
    omega, _ = model._pace(_pace_arrays([s.correct[-win:] for s in per_concept]), 1)
    return omega[0]


def _check_rows(H, Delta):
    H = np.asarray(H, dtype=np.float64)
    Delta = np.asarray(Delta, dtype=np.float64)
    if H.ndim != 2 or Delta.ndim != 2 or H.shape[0] != Delta.shape[0]:
        raise ShapeError(f"H {H.shape} and Delta {Delta.shape} must be (L, .) with equal L")
    return H, Delta


def _head_values(model, H, Delta):
    H, Delta = _check_rows(H, Delta)
    mu, sig, _ = model._heads(H[:, None, :], Delta[None])
    return mu[0], sig[0]


def score_deterministic(model: Reranker, H, Delta) -> np.ndarray:
    return _head_values(model, H, Delta)[0]


def score_probabilistic(model: Reranker, H, Delta, xi) -> np.ndarray:
    mu, sig = _head_values(model, H, Delta)
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != mu.shape:
        raise ShapeError(f"noise {xi.shape} vs {mu.shape} scores")
    return mu + xi * sig


def ucb_score(model: Reranker, H, Delta) -> np.ndarray:
    mu, sig = _head_values(model, H, Delta)
    return mu + sig


def rank_order(scores, exercises) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending catalog index."""
    return np.lexsort((np.asarray(exercises), -np.asarray(scores, dtype=np.float64)))


def rerank(model: Reranker, instance: RerankInstance, K: int = 10, mode: str = "det") -> RerankOutput:
    return rerank_many(model, [instance], K, mode)[0]


def rerank_many(model: Reranker, instances, K: int = 10, mode: str = "det", batch_size: int = 32):
    if not model.trained:
        raise StateError("re-ranker has not been trained or loaded")
    if K < 1:
        raise ValueError("K must be >= 1")
    out = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start : start + batch_size]
        for inst, (mu, sig, omega) in zip(chunk, model.scores(chunk, mode)):
            s = mu if mode == "det" else mu + sig
            ex = np.asarray(inst.candidates.exercises)
            order = rank_order(s, ex)[:K]
            out.append(RerankOutput(inst.student_id, ex[order], s[order], mode, K, omega))
    return out


def write_rerank_csv(outputs: Iterable[RerankOutput], catalog: Catalog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RERANK_HEADER)
        for o in outputs:
            for r, (j, s) in enumerate(zip(o.exercises, o.scores), start=1):
                w.writerow((o.student_id, r, catalog.ids[j], repr(float(s)), o.mode))


# -- training ------------------------------------------------------------------------


@dataclass
class RerankLog:
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "loss"))
            for e, l in self.rows:
                w.writerow((e, repr(float(l))))


def train_reranker(instances: Sequence[RerankInstance], catalog: Catalog, h_dim: int, cfg: RerankerConfig | None = None):
    """Minimise the listwise cross-entropy with Adam; returns ``(model, log)``."""
    model = Reranker(catalog, h_dim, cfg)
    cfg = model.cfg
    if not instances:
        raise EmptyInputError("no training instances")
    rng = np.random.default_rng([cfg.seed, 3])
    opt = Adam(model.params, lr=cfg.learning_rate, clip_norm=cfg.clip_norm)
    history = RerankLog()
    lengths = np.array([len(i.candidates) for i in instances])
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(instances))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [instances[j] for j in idx]
            xi = None
            if cfg.train_mode == "prob":
                xi = rng.standard_normal((len(idx), int(lengths[idx].max())))
            model.params.zero_grad()
            loss = model.batch_loss(batch, xi)
            if not np.isfinite(loss):
                err = TrainingError("re-ranker loss is not finite", epoch=epoch)
                err.log = history
                raise err
            opt.step()
            total += loss * len(idx)
        history.rows.append((epoch, total / len(instances)))
        log.debug("reranker epoch %d loss=%.5f", epoch, total / len(instances))
    model.trained = True
    return model, history
