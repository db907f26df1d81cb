"""Students, exercises and interaction logs.

Exercises are stored in a :class:`Catalog` sorted by natural id order, and
sequences refer to exercises by catalog index, so index order and id order
coincide for every tie-break in the package.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import EmptyDatasetError, ParseError, ValidationError

LOG_HEADER = ("student_id", "exercise_id", "correct")
KC_HEADER = ("exercise_id", "concept_ids")

_INT_RE = re.compile(r"^-?\d+$")


def id_sort_key(x: str):
    """Integers sort numerically and before other ids; everything else lexically."""
    s = str(x)
    if _INT_RE.match(s):
        return (0, int(s), s)
    return (1, 0, s)


class Interaction(NamedTuple):
    exercise_id: str
    correct: int
    position: int


@dataclass(frozen=True, eq=False)
class InteractionSequence:
    """One student's answers in time order.

    ``exercises`` holds catalog indices; ``positions`` are the original
    ordinal time steps, which survive slicing so train/test pieces can be
    checked for overlap.
    """

    student_id: str
    exercises: np.ndarray
    correct: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        ex = np.asarray(self.exercises, dtype=np.int64)
        co = np.asarray(self.correct, dtype=np.int8)
        po = np.asarray(self.positions, dtype=np.int64)
        if not (len(ex) == len(co) == len(po)):
            raise ValueError("sequence arrays differ in length")
        for a in (ex, co, po):
            a.setflags(write=False)
        object.__setattr__(self, "exercises", ex)
        object.__setattr__(self, "correct", co)
        object.__setattr__(self, "positions", po)

    @classmethod
    def from_arrays(cls, student_id, exercises, correct, positions=None):
        n = len(exercises)
        return cls(str(student_id), exercises, correct, np.arange(n) if positions is None else positions)

    def __len__(self):
        return len(self.exercises)

    def __getitem__(self, key):
        if isinstance(key, slice):
            return InteractionSequence(self.student_id, self.exercises[key], self.correct[key], self.positions[key])
        raise TypeError("InteractionSequence supports slicing only; use .items for single interactions")

    def __eq__(self, other):
        if not isinstance(other, InteractionSequence):
            return NotImplemented
        return (
            self.student_id == other.student_id
            and np.array_equal(self.exercises, other.exercises)
            and np.array_equal(self.correct, other.correct)
            and np.array_equal(self.positions, other.positions)
        )

    def items(self, catalog: "Catalog") -> list[Interaction]:
        return [
            Interaction(catalog.ids[e], int(a), int(p))
            for e, a, p in zip(self.exercises, self.correct, self.positions)
        ]


@dataclass(frozen=True)
class Exercise:
    exercise_id: str
    coverage: np.ndarray

    @property
    def concepts(self) -> np.ndarray:
        return np.flatnonzero(self.coverage)


class Catalog:
    """Exercise ids and their binary concept coverage matrix ``(|E|, M)``."""

    def __init__(self, ids: Sequence[str], coverage: np.ndarray):
        ids = [str(i) for i in ids]
        coverage = np.asarray(coverage, dtype=np.float64)
        if coverage.ndim != 2 or coverage.shape[0] != len(ids):
            raise ValidationError(f"coverage shape {coverage.shape} does not match {len(ids)} exercises")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate exercise ids in catalog")
        order = sorted(range(len(ids)), key=lambda j: id_sort_key(ids[j]))
        self.ids: tuple[str, ...] = tuple(ids[j] for j in order)
        cov = coverage[order].copy()
        if cov.size and not np.all((cov == 0) | (cov == 1)):
            raise ValidationError("coverage entries must be 0 or 1")
        empty = np.flatnonzero(cov.sum(axis=1) == 0) if cov.size else []
        if len(empty):
            raise ValidationError(f"exercise {self.ids[empty[0]]} covers no concept")
        cov.setflags(write=False)
        self.coverage = cov
        self.index = {e: j for j, e in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def n_concepts(self) -> int:
        return self.coverage.shape[1]

    def __getitem__(self, key) -> Exercise:
        j = self.index[key] if isinstance(key, str) else int(key)
        return Exercise(self.ids[j], self.coverage[j])

    def __eq__(self, other):
        return isinstance(other, Catalog) and self.ids == other.ids and np.array_equal(self.coverage, other.coverage)

    def indices(self, ids: Iterable[str]) -> np.ndarray:
        return np.array([self.index[str(e)] for e in ids], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Dataset:
    students: Mapping[str, InteractionSequence]
    catalog: Catalog

    def __post_init__(self):
        ordered = dict(sorted(self.students.items(), key=lambda kv: id_sort_key(kv[0])))
        E = len(self.catalog)
        for sid, seq in ordered.items():
            if len(seq) == 0:
                raise ValidationError(f"student {sid} has no interactions")
            if seq.student_id != sid:
                raise ValidationError(f"sequence for {sid} is labelled {seq.student_id}")
            if len(seq) and (seq.exercises.min() < 0 or seq.exercises.max() >= E):
                raise ValidationError(f"student {sid} references an exercise outside the catalog")
            if len(seq) > 1 and np.any(np.diff(seq.positions) <= 0):
                raise ValidationError(f"student {sid}: positions not strictly increasing")
            if not np.all((seq.correct == 0) | (seq.correct == 1)):
                raise ValidationError(f"student {sid}: correctness outside {{0,1}}")
        object.__setattr__(self, "students", ordered)

    @property
    def n_students(self) -> int:
        return len(self.students)

    @property
    def n_exercises(self) -> int:
        return len(self.catalog)

    @property
    def n_concepts(self) -> int:
        return self.catalog.n_concepts

    @property
    def n_interactions(self) -> int:
        return sum(len(s) for s in self.students.values())

    @property
    def student_ids(self) -> list[str]:
        return list(self.students)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.catalog == other.catalog
            and list(self.students) == list(other.students)
            and all(self.students[k] == other.students[k] for k in self.students)
        )

    def subset(self, student_ids: Iterable[str]) -> "Dataset":
        return Dataset({s: self.students[s] for s in student_ids}, self.catalog)

    def summary(self) -> dict[str, int]:
        return {
            "Students": self.n_students,
            "KCs": self.n_concepts,
            "Exercises": self.n_exercises,
            "Interactions": self.n_interactions,
        }

    def fingerprint(self) -> str:
        """SHA-256 of the canonical CSV export; identifies dataset versions."""
        h = hashlib.sha256()
        buf = io.StringIO()
        write_interactions(self, buf)
        write_concept_map(self.catalog, buf)
        h.update(buf.getvalue().encode())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# ingestion


def _open_text(source):
    if isinstance(source, (str, Path)):
        return open(source, encoding="utf-8", newline=""), Path(source)
    return source, getattr(source, "name", None)


def read_concept_map(source, n_concepts: int | None = None) -> Catalog:
    fh, path = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError("concept map is empty", path=path)
        if tuple(h.strip() for h in header) != KC_HEADER:
            raise ParseError(f"expected header {','.join(KC_HEADER)}, got {','.join(header)}", line=1, path=path)
        ids, concepts = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", line=lineno, path=path)
            eid, raw = row[0].strip(), row[1].strip()
            if not eid:
                raise ParseError("empty exercise id", line=lineno, path=path)
            try:
                ks = sorted({int(k) for k in raw.split(";") if k.strip() != ""})
            except ValueError:
                raise ParseError(f"concept ids must be integers: {raw!r}", line=lineno, path=path) from None
            if not ks:
                raise ValidationError(f"exercise {eid} has no concepts", line=lineno, path=path)
            if ks[0] < 0 or (n_concepts is not None and ks[-1] >= n_concepts):
                raise ValidationError(f"concept id out of range in {raw!r}", line=lineno, path=path)
            if eid in ids:
                raise ValidationError(f"duplicate exercise id {eid}", line=lineno, path=path)
            ids.append(eid)
            concepts.append(ks)
    finally:
        if path is not None and fh is not source:
            fh.close()
    if not ids:
        raise EmptyDatasetError("concept map has no rows", path=path)
    M = n_concepts if n_concepts is not None else max(k[-1] for k in concepts) + 1
    cov = np.zeros((len(ids), M))
    for j, ks in enumerate(concepts):
        cov[j, ks] = 1.0
    return Catalog(ids, cov)


def ingest_interactions(log_source, kc_source, n_concepts: int | None = None) -> Dataset:
    """Parse an interaction log and a concept map into a validated Dataset.

    Within-student order follows the ``timestamp`` column when present
    (stable for equal stamps) and file order otherwise. Exact duplicate rows
    are dropped only when timestamps are present, since without them a
    repeated row is a legitimate repeated attempt.
    """
    catalog = kc_source if isinstance(kc_source, Catalog) else read_concept_map(kc_source, n_concepts)
    fh, path = _open_text(log_source)
    rows: dict[str, list] = {}
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError("interaction log is empty", path=path)
        header = tuple(h.strip() for h in header)
        if header[:3] != LOG_HEADER or len(header) not in (3, 4) or (len(header) == 4 and header[3] != "timestamp"):
            raise ParseError(
                f"expected header {','.join(LOG_HEADER)}[,timestamp], got {','.join(header)}", line=1, path=path
            )
        has_ts = len(header) == 4
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno, path=path)
            sid, eid, corr = (c.strip() for c in row[:3])
            if not sid or not eid:
                raise ParseError("empty student or exercise id", line=lineno, path=path)
            if corr not in ("0", "1"):
                raise ValidationError(f"correct must be 0 or 1, got {corr!r}", line=lineno, path=path)
            if eid not in catalog.index:
                raise ValidationError(f"unknown exercise id {eid!r}", line=lineno, path=path)
            ts = 0.0
            if has_ts:
                try:
                    ts = float(row[3])
                except ValueError:
                    raise ParseError(f"bad timestamp {row[3]!r}", line=lineno, path=path) from None
                key = (sid, eid, corr, row[3].strip())
                if key in seen:
                    continue
                seen.add(key)
            rows.setdefault(sid, []).append((ts, lineno, catalog.index[eid], int(corr)))
    finally:
        if path is not None and fh is not log_source:
            fh.close()
    if not rows:
        raise EmptyDatasetError("interaction log has no rows", path=path)
    students = {}
    for sid, items in rows.items():
        if has_ts:
            items.sort(key=lambda r: (r[0], r[1]))
        ex = np.array([r[2] for r in items])
        co = np.array([r[3] for r in items])
        students[sid] = InteractionSequence.from_arrays(sid, ex, co)
    return Dataset(students, catalog)


def write_interactions(ds: Dataset, dest) -> None:
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        ids = ds.catalog.ids
        for sid, seq in ds.students.items():
            for e, a in zip(seq.exercises, seq.correct):
                w.writerow((sid, ids[e], int(a)))
    finally:
        if own:
            fh.close()


def write_concept_map(catalog: Catalog, dest) -> None:
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", encoding="utf-8", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(KC_HEADER)
        for j, eid in enumerate(catalog.ids):
            w.writerow((eid, ";".join(str(k) for k in np.flatnonzero(catalog.coverage[j]))))
    finally:
        if own:
            fh.close()


def write_dataset(ds: Dataset, directory) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    log, kc = d / "interactions.csv", d / "concepts.csv"
    write_interactions(ds, log)
    write_concept_map(ds.catalog, kc)
    return log, kc


def read_dataset(directory, n_concepts: int | None = None) -> Dataset:
    d = Path(directory)
    return ingest_interactions(d / "interactions.csv", d / "concepts.csv", n_concepts)


# --------------------------------------------------------------------------
# partitioning and splitting


@dataclass(frozen=True)
class LongTailSplit:
    active_ids: frozenset
    inactive_ids: frozenset
    active_fraction: float

    def is_active(self, sid: str) -> bool:
        return sid in self.active_ids

    def group_of(self, sid: str) -> str:
        return "active" if sid in self.active_ids else "inactive"


def partition_students(ds: Dataset, active_fraction: float = 0.05) -> LongTailSplit:
    """Top ``ceil(fraction * N)`` students by interaction count are active.

    Ties in count go to the smaller student id.
    """
    if not 0.0 < active_fraction < 1.0:
        raise ValueError("active_fraction must lie in (0, 1)")
    ids = ds.student_ids
    n_active = math.ceil(active_fraction * len(ids) - 1e-9)
    ranked = sorted(ids, key=lambda s: (-len(ds.students[s]), id_sort_key(s)))
    return LongTailSplit(frozenset(ranked[:n_active]), frozenset(ranked[n_active:]), active_fraction)


class SplitResult(NamedTuple):
    train: Dataset
    test: Dataset
    skipped: tuple[str, ...]


def split_train_test(ds: Dataset, ratio: tuple[float, float] = (8, 2)) -> SplitResult:
    """Per-student temporal split: earliest items to train, latest to test.

    The test share is ``floor(n * test / (train + test))``, raised to 1 for
    any student with at least two interactions. Single-interaction students
    go wholly to train and are listed in ``skipped``.
    """
    r_train, r_test = ratio
    if r_train <= 0 or r_test <= 0:
        raise ValueError("split ratio entries must be positive")
    share = r_test / (r_train + r_test)
    train, test, skipped = {}, {}, []
    for sid, seq in ds.students.items():
        n = len(seq)
        if n < 2:
            train[sid] = seq
            skipped.append(sid)
            continue
        n_test = max(1, math.floor(n * share + 1e-9))
        train[sid] = seq[: n - n_test]
        test[sid] = seq[n - n_test :]
    return SplitResult(Dataset(train, ds.catalog), Dataset(test, ds.catalog), tuple(skipped))


def truncate_sequence(seq: InteractionSequence, T: int) -> InteractionSequence:
    """The most recent ``T`` interactions (the whole sequence if shorter)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return seq[max(0, len(seq) - T) :]
