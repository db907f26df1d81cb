"""Difficulty-aware candidate filtering.

Per-concept mastery becomes an exercise difficulty ``1 - prod P(k)`` over the
exercise's concepts; exercises are weighted by their distance to the target
difficulty ``delta`` and the ``L`` closest form the candidate set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .datamodel import Catalog, Exercise, InteractionSequence
from .errors import ConfigError, ShapeError

DEFAULT_DELTA = 0.7
DEFAULT_L = 50
CANDIDATE_HEADER = ("student_id", "rank", "exercise_id", "weight", "difficulty")


def exercise_difficulty(mastery, exercise) -> float:
    """``D_e = 1 - prod_{k in e} P(k)``.

    ``exercise`` is an :class:`Exercise` or a coverage vector.
    """
    cov = exercise.coverage if isinstance(exercise, Exercise) else exercise
    cov = np.asarray(cov, dtype=np.float64)
    p = np.asarray(mastery, dtype=np.float64)
    if p.shape != cov.shape:
        raise ShapeError(f"mastery {p.shape} vs coverage {cov.shape}")
    return float(1.0 - np.prod(np.where(cov > 0, p, 1.0)))


def difficulties(mastery, coverage) -> np.ndarray:
    """Vectorised :func:`exercise_difficulty` over a coverage matrix ``(E, M)``."""
    p = np.asarray(mastery, dtype=np.float64)
    coverage = np.asarray(coverage)
    if coverage.ndim != 2 or coverage.shape[1] != p.shape[-1]:
        raise ShapeError(f"mastery {p.shape} vs coverage {coverage.shape}")
    return 1.0 - np.prod(np.where(coverage > 0, p, 1.0), axis=1)


def exercise_weight(delta: float, difficulty) -> np.ndarray | float:
    """``|delta - D_e|``: distance from the target difficulty."""
    w = np.abs(delta - np.asarray(difficulty, dtype=np.float64))
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class CandidateSet:
    """Candidates in ascending weight order (catalog order on ties)."""

    student_id: str
    exercises: np.ndarray  # catalog indices
    weights: np.ndarray
    difficulty: np.ndarray
    capacity: int
    truncated: bool = False  # L exceeded the number of eligible exercises

    def __len__(self):
        return len(self.exercises)

    def ids(self, catalog: Catalog) -> list[str]:
        return [catalog.ids[j] for j in self.exercises]


def solved_exercises(history: InteractionSequence) -> np.ndarray:
    return np.unique(history.exercises[history.correct == 1])


def build_candidate_set(
    student_id: str,
    mastery,
    catalog: Catalog,
    delta: float = DEFAULT_DELTA,
    L: int = DEFAULT_L,
    exclude: Iterable[int] | None = None,
) -> CandidateSet:
    """The ``L`` exercises whose difficulty lies closest to ``delta``.

    ``exclude`` holds catalog indices removed before weighting (by default
    nothing; the pipeline passes each student's solved exercises).
    """
    if L < 1:
        raise ConfigError("L must be >= 1")
    if not 0.0 <= delta <= 1.0:
        raise ConfigError("delta must lie in [0, 1]")
    if len(catalog) == 0:
        raise ConfigError("catalog is empty")
    D = difficulties(mastery, catalog.coverage)
    W = exercise_weight(delta, D)
    eligible = np.ones(len(catalog), dtype=bool)
    if exclude is not None:
        eligible[np.asarray(list(exclude), dtype=np.int64)] = False
    pool = np.flatnonzero(eligible)
    if len(pool) == 0:
        # everything excluded: fall back to the full catalog
        pool = np.arange(len(catalog))
    order = pool[np.argsort(W[pool], kind="stable")]
    chosen = order[:L]
    return CandidateSet(student_id, chosen, W[chosen], D[chosen], L, truncated=L > len(pool))


def write_candidates_csv(sets: Iterable[CandidateSet], catalog: Catalog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_HEADER)
        for cs in sets:
            for r, (j, wt, d) in enumerate(zip(cs.exercises, cs.weights, cs.difficulty), start=1):
                w.writerow((cs.student_id, r, catalog.ids[j], repr(float(wt)), repr(float(d))))
