"""Seeded synthetic student populations with known latent mastery.

Each student has a per-concept mastery logit ``ability + offset + rate *
practice_count`` that only grows with practice, a personal interest
distribution over concepts (some students focus on a few concepts, others
spread out), and a preferred difficulty. At every step the student picks a
concept by interest, then an unsolved exercise covering it whose true
difficulty is close to their preferred difficulty, and answers correctly
with the product of the covered concepts' success probabilities.
Interaction counts follow Pareto quantiles with shape ``skew`` to give a
long tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .datamodel import Catalog, Dataset, InteractionSequence
from .errors import ConfigError


@dataclass
class SynthConfig:
    n_students: int = 200
    n_concepts: int = 20
    n_exercises: int = 100
    skew: float = 1.5
    min_length: int = 12
    max_length: int = 600
    second_concept_prob: float = 0.3
    ability_sd: float = 1.2
    concept_sd: float = 1.0
    exercise_sd: float = 0.4
    learn_rate_low: float = 0.02
    learn_rate_high: float = 0.10
    interest_conc_low: float = 0.05
    interest_conc_high: float = 1.0
    target_difficulty: float = 0.7
    target_difficulty_sd: float = 0.1
    choice_width: float = 0.15
    seed: int = 0

    def validate(self):
        if self.n_students < 1 or self.n_concepts < 1 or self.n_exercises < 1:
            raise ConfigError("n_students, n_concepts and n_exercises must be >= 1")
        if self.n_exercises < self.n_concepts:
            raise ConfigError("need at least one exercise per concept")
        if self.skew <= 0:
            raise ConfigError("skew must be positive")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigError("need 1 <= min_length <= max_length")
        if self.learn_rate_low < 0 or self.learn_rate_high < self.learn_rate_low:
            raise ConfigError("learn-rate range must be non-negative and ordered")
        if not 0.0 <= self.second_concept_prob <= 1.0:
            raise ConfigError("second_concept_prob must lie in [0, 1]")


@dataclass
class LatentTruth:
    """Generator parameters needed to recompute any student's true mastery."""

    student_ids: list[str]
    base_logit: np.ndarray  # (N, M)
    learn_rate: np.ndarray  # (N,)
    interest: np.ndarray  # (N, M)
    exercise_offset: np.ndarray  # (E,)

    def mastery_after(self, student_index: int, coverage: np.ndarray, exercises: np.ndarray) -> np.ndarray:
        """Per-concept success probability after practising ``exercises``."""
        counts = coverage[np.asarray(exercises, dtype=np.int64)].sum(axis=0) if len(exercises) else 0.0
        return expit(self.base_logit[student_index] + self.learn_rate[student_index] * counts)


@dataclass
class SyntheticData:
    dataset: Dataset
    truth: LatentTruth

    def final_mastery(self) -> np.ndarray:
        """``(N, M)`` latent mastery at the end of every student's sequence."""
        cov = self.dataset.catalog.coverage
        return np.stack(
            [
                self.truth.mastery_after(i, cov, self.dataset.students[sid].exercises)
                for i, sid in enumerate(self.truth.student_ids)
            ]
        )

    def mastery_at(self, student_id: str, n_steps: int) -> np.ndarray:
        i = self.truth.student_ids.index(student_id)
        seq = self.dataset.students[student_id]
        return self.truth.mastery_after(i, self.dataset.catalog.coverage, seq.exercises[:n_steps])


def _catalog(cfg: SynthConfig, rng) -> tuple[Catalog, np.ndarray]:
    E, M = cfg.n_exercises, cfg.n_concepts
    cov = np.zeros((E, M))
    primary = rng.permutation(np.arange(E) % M)
    cov[np.arange(E), primary] = 1.0
    for e in range(E):
        if M > 1 and rng.random() < cfg.second_concept_prob:
            other = rng.choice(np.delete(np.arange(M), primary[e]))
            cov[e, other] = 1.0
    width = len(str(E - 1))
    ids = [f"e{j:0{width}d}" for j in range(E)]
    offset = rng.normal(0.0, cfg.exercise_sd, size=E)
    return Catalog(ids, cov), offset


def generate_synthetic(cfg: SynthConfig | None = None, **overrides) -> SyntheticData:
    cfg = cfg or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**cfg.__dict__, **overrides})
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    catalog, ex_offset = _catalog(cfg, rng)
    cov = catalog.coverage
    N, M, E = cfg.n_students, cfg.n_concepts, cfg.n_exercises
    by_concept = [np.flatnonzero(cov[:, k]) for k in range(M)]

    # stratified Pareto quantiles, randomly assigned: same tail profile every seed
    q = (np.arange(N) + 0.5) / N
    lengths = np.floor(cfg.min_length * (1.0 - q) ** (-1.0 / cfg.skew)).astype(np.int64)
    lengths = rng.permutation(np.clip(lengths, cfg.min_length, cfg.max_length))
    ability = rng.normal(0.0, cfg.ability_sd, size=N)
    base = ability[:, None] + rng.normal(0.0, cfg.concept_sd, size=(N, M))
    rate = rng.uniform(cfg.learn_rate_low, cfg.learn_rate_high, size=N)
    conc = np.exp(rng.uniform(np.log(cfg.interest_conc_low), np.log(cfg.interest_conc_high), size=N))
    interest = np.stack([rng.dirichlet(np.full(M, c)) for c in conc])
    interest = np.maximum(interest, 1e-12)
    interest /= interest.sum(axis=1, keepdims=True)
    target = np.clip(rng.normal(cfg.target_difficulty, cfg.target_difficulty_sd, size=N), 0.05, 0.95)

    width = len(str(N - 1))
    sids = [f"s{i:0{width}d}" for i in range(N)]
    students = {}
    for i in range(N):
        counts = np.zeros(M)
        solved = np.zeros(E, dtype=bool)
        ex = np.empty(lengths[i], dtype=np.int64)
        co = np.empty(lengths[i], dtype=np.int8)
        for t in range(lengths[i]):
            k = rng.choice(M, p=interest[i])
            pool = by_concept[k]
            open_ = pool[~solved[pool]]
            if len(open_):
                pool = open_
            logit = base[i] + rate[i] * counts
            p_concept = expit(logit[None, :] - ex_offset[pool, None])
            p_success = np.prod(np.where(cov[pool] > 0, p_concept, 1.0), axis=1)
            w = np.exp(-0.5 * (((1.0 - p_success) - target[i]) / cfg.choice_width) ** 2) + 1e-12
            e = pool[rng.choice(len(pool), p=w / w.sum())]
            p = p_success[np.flatnonzero(pool == e)[0]]
            a = int(rng.random() < p)
            ex[t], co[t] = e, a
            counts += cov[e]
            if a:
                solved[e] = True
        students[sids[i]] = InteractionSequence.from_arrays(sids[i], ex, co)
    truth = LatentTruth(sids, base, rate, interest, ex_offset)
    return SyntheticData(Dataset(students, catalog), truth)


def top_share(ds: Dataset, fraction: float = 0.05) -> float:
    """Share of all interactions held by the most active ``fraction`` of students."""
    lengths = np.sort([len(s) for s in ds.students.values()])[::-1]
    n = int(np.ceil(fraction * len(lengths) - 1e-9))
    return float(lengths[:n].sum() / lengths.sum())
