"""Ranking and diversity metrics, simple baselines and comparison reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import Catalog, Dataset, LongTailSplit, id_sort_key
from .filtering import CandidateSet

KS = (1, 3, 5, 10)
METRICS = ("ndcg", "recall", "f1", "div")
GROUPS = ("overall", "active", "inactive")
REPORT_HEADER = ("method", "group", "metric", "k", "value", "n_students")


def _check_k(K):
    if K < 1:
        raise ValueError("K must be >= 1")


def dcg_at_k(ranked, relevant, K) -> float:
    rel = set(relevant)
    return sum(1.0 / math.log2(r + 2) for r, e in enumerate(list(ranked)[:K]) if e in rel)


def ndcg_at_k(ranked, relevant, K: int) -> float:
    """Binary-gain NDCG with a ``1/log2(rank+1)`` discount; 0 if nothing is relevant."""
    _check_k(K)
    rel = set(relevant)
    if not rel:
        return 0.0
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(K, len(rel))))
    return dcg_at_k(ranked, rel, K) / ideal


def hits_at_k(ranked, relevant, K) -> int:
    rel = set(relevant)
    return sum(1 for e in list(ranked)[:K] if e in rel)


def precision_at_k(ranked, relevant, K: int) -> float:
    _check_k(K)
    return hits_at_k(ranked, relevant, K) / K


def recall_at_k(ranked, relevant, K: int) -> float:
    _check_k(K)
    rel = set(relevant)
    if not rel:
        return 0.0
    return hits_at_k(ranked, rel, K) / len(rel)


def f1_from(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_at_k(ranked, relevant, K: int) -> float:
    return f1_from(precision_at_k(ranked, relevant, K), recall_at_k(ranked, relevant, K))


def div(exercises, catalog) -> int:
    """Number of distinct concepts covered by ``exercises`` (catalog indices)."""
    cov = catalog.coverage if isinstance(catalog, Catalog) else np.asarray(catalog)
    idx = np.asarray(list(exercises), dtype=np.int64)
    if len(idx) == 0:
        return 0
    return int(np.count_nonzero(cov[idx].sum(axis=0)))


# -- baselines -------------------------------------------------------------------


def filter_order(cands: CandidateSet) -> np.ndarray:
    return np.asarray(cands.exercises).copy()


def random_order(cands: CandidateSet, rng) -> np.ndarray:
    return np.asarray(cands.exercises)[rng.permutation(len(cands))]


def greedy_coverage_order(cands: CandidateSet, catalog) -> np.ndarray:
    """Repeatedly take the candidate adding the most uncovered concepts.

    Ties (including the all-zero gain once everything is covered) go to the
    earlier candidate in filter order.
    """
    cov = catalog.coverage if isinstance(catalog, Catalog) else np.asarray(catalog)
    ex = list(np.asarray(cands.exercises))
    covered = np.zeros(cov.shape[1], dtype=bool)
    out = []
    while ex:
        gains = [int(np.count_nonzero((cov[e] > 0) & ~covered)) for e in ex]
        j = int(np.argmax(gains))
        e = ex.pop(j)
        covered |= cov[e] > 0
        out.append(e)
    return np.array(out, dtype=np.int64)


# -- reports ----------------------------------------------------------------------


@dataclass
class MetricReport:
    """Group means of every metric at every cut-off, per method."""

    rows: list = field(default_factory=list)  # (method, group, metric, k, value, n)
    notes: list = field(default_factory=list)

    def get(self, method: str, group: str, metric: str, k: int) -> float:
        for m, g, me, kk, v, _ in self.rows:
            if (m, g, me, kk) == (method, group, metric, k):
                return v
        raise KeyError((method, group, metric, k))

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r[0] for r in self.rows))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for m, g, me, k, v, n in self.rows:
                w.writerow((m, g, me, k, f"{v:.10f}", n))

    def to_text(self, ks: Sequence[int] | None = None) -> str:
        ks = sorted({r[3] for r in self.rows}) if ks is None else ks
        cols = [f"{me}@{k}" for me in METRICS for k in ks]
        head = f"{'method':<18}{'group':<10}" + "".join(f"{c:>10}" for c in cols)
        lines = [head, "-" * len(head)]
        for m in self.methods:
            for g in GROUPS:
                vals = []
                for me in METRICS:
                    for k in ks:
                        try:
                            v = self.get(m, g, me, k)
                        except KeyError:
                            vals.append(f"{'-':>10}")
                            continue
                        vals.append(f"{v:>10.2f}" if me == "div" else f"{v:>10.4f}")
                lines.append(f"{m:<18}{g:<10}" + "".join(vals))
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"

    def diversity_curve(self, group: str = "overall") -> list[tuple[str, int, float]]:
        return [(m, k, v) for m, g, me, k, v, _ in self.rows if g == group and me == "div"]

    def write_diversity_curve(self, path, group: str = "overall"):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("method", "k", "div"))
            for m, k, v in self.diversity_curve(group):
                w.writerow((m, k, f"{v:.10f}"))


def relevant_sets(test: Dataset) -> dict[str, set]:
    """Exercises attempted in each student's test window."""
    return {sid: set(np.asarray(seq.exercises).tolist()) for sid, seq in test.students.items()}


def evaluate(
    rankings: Mapping[str, Mapping[str, Sequence[int]]],
    test: Dataset,
    split: LongTailSplit,
    ks: Iterable[int] = KS,
    report: MetricReport | None = None,
) -> MetricReport:
    """Metrics for every ranking method, averaged per student then per group.

    ``rankings`` maps method name to ``{student_id: ranked catalog indices}``.
    Students with no relevant test items are left out of NDCG/Recall/F1 but
    still count toward DIV.
    """
    ks = tuple(ks)
    report = report or MetricReport()
    rel = relevant_sets(test)
    cat = test.catalog
    for method, ranked in rankings.items():
        sids = sorted(ranked, key=id_sort_key)
        excluded = [s for s in sids if not rel.get(s)]
        for group in GROUPS:
            members = [s for s in sids if group == "overall" or split.group_of(s) == group]
            scored = [s for s in members if rel.get(s)]
            for k in ks:
                vals = {
                    "ndcg": [ndcg_at_k(ranked[s], rel[s], k) for s in scored],
                    "recall": [recall_at_k(ranked[s], rel[s], k) for s in scored],
                    "f1": [f1_at_k(ranked[s], rel[s], k) for s in scored],
                    "div": [div(list(ranked[s])[:k], cat) for s in members],
                }
                for me in METRICS:
                    v = vals[me]
                    n = len(v)
                    report.rows.append((method, group, me, k, float(np.mean(v)) if n else 0.0, n))
        if excluded:
            report.notes.append(f"{method}: {len(excluded)} students without relevant test items excluded from ndcg/recall/f1")
    return report


def baseline_rankings(candidates: Mapping[str, CandidateSet], catalog, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, 4])
    sids = sorted(candidates, key=id_sort_key)
    return {
        "random": {s: random_order(candidates[s], rng) for s in sids},
        "filter_order": {s: filter_order(candidates[s]) for s in sids},
        "greedy_coverage": {s: greedy_coverage_order(candidates[s], catalog) for s in sids},
    }
