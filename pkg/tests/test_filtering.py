import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exrec.datamodel import Catalog, InteractionSequence
from exrec.errors import ConfigError, ShapeError
from exrec.filtering import (
    DEFAULT_DELTA,
    build_candidate_set,
    difficulties,
    exercise_difficulty,
    exercise_weight,
    solved_exercises,
    write_candidates_csv,
)


def _catalog(cov):
    cov = np.asarray(cov, dtype=float)
    return Catalog([f"x{j:03d}" for j in range(len(cov))], cov)


class TestDifficulty:
    def test_spot_values(self):
        assert exercise_difficulty([0.5, 0.5], [1, 1]) == 0.75
        assert exercise_difficulty([1.0, 0.3], [1, 0]) == 0.0
        assert exercise_difficulty([0.9, 0.0], [1, 1]) == 1.0

    def test_vectorised_matches_scalar(self, rng):
        p = rng.uniform(size=4)
        cov = (rng.uniform(size=(7, 4)) < 0.5).astype(float)
        cov[:, 0] = 1.0
        np.testing.assert_allclose(difficulties(p, cov), [exercise_difficulty(p, c) for c in cov])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
    def test_monotone_in_mastery(self, p, k, bump):
        cov = np.ones(3)
        q = list(p)
        q[k] = max(p[k], bump)
        assert exercise_difficulty(q, cov) <= exercise_difficulty(p, cov) + 1e-15

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            exercise_difficulty([0.5], [1, 1])


class TestWeight:
    def test_examples(self):
        assert exercise_weight(0.7, 0.7) == 0.0
        assert exercise_weight(0.7, 0.2) == pytest.approx(0.5)
        for x in (0.05, 0.1, 0.3):
            assert exercise_weight(0.6, 0.6 + x) == pytest.approx(exercise_weight(0.6, 0.6 - x))


class TestCandidates:
    def test_sort_semantics(self):
        # difficulties 0.6, 0.7, 0.4 -> weights 0.1, 0.0, 0.3
        cat = _catalog(np.eye(3))
        cs = build_candidate_set("s", [0.4, 0.3, 0.6], cat, 0.7, 2)
        assert cs.ids(cat) == ["x001", "x000"]
        np.testing.assert_allclose(cs.weights, [0.0, 0.1], atol=1e-15)

    def test_equal_weights_take_smallest_ids(self):
        cat = _catalog(np.eye(5))
        cs = build_candidate_set("s", np.full(5, 0.5), cat, 0.7, 3)
        assert cs.ids(cat) == ["x000", "x001", "x002"]

    def test_L_exceeds_catalog(self):
        cat = _catalog(np.eye(3))
        cs = build_candidate_set("s", np.full(3, 0.5), cat, 0.7, 10)
        assert len(cs) == 3 and cs.truncated

    def test_exclusion_and_fallback(self):
        cat = _catalog(np.eye(3))
        cs = build_candidate_set("s", [0.3, 0.3, 0.3], cat, 0.7, 3, exclude=[0])
        assert 0 not in cs.exercises
        everything = build_candidate_set("s", [0.3, 0.3, 0.3], cat, 0.7, 3, exclude=[0, 1, 2])
        assert len(everything) == 3

    def test_solved(self):
        seq = InteractionSequence.from_arrays("s", [3, 1, 3, 2], [0, 1, 1, 0])
        np.testing.assert_array_equal(solved_exercises(seq), [1, 3])

    def test_errors(self):
        cat = _catalog(np.eye(2))
        with pytest.raises(ConfigError):
            build_candidate_set("s", [0.5, 0.5], cat, 0.7, 0)
        with pytest.raises(ConfigError):
            build_candidate_set("s", [0.5, 0.5], cat, 1.5, 1)

    def test_default_grid_on_synthetic(self, small_synth):
        cat = small_synth.dataset.catalog
        cs = build_candidate_set("s", np.full(cat.n_concepts, 0.4), cat, DEFAULT_DELTA, 50)
        assert len(cs) == 50

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 50), st.integers(1, 60), st.floats(0, 1))
    def test_matches_exhaustive_sort(self, seed, E, L, delta):
        rng = np.random.default_rng(seed)
        M = 4
        cov = (rng.uniform(size=(E, M)) < 0.4).astype(float)
        cov[np.arange(E), rng.integers(0, M, E)] = 1.0
        p = np.round(rng.uniform(size=M), 2)  # coarse values create ties
        cat = _catalog(cov)
        cs = build_candidate_set("s", p, cat, delta, L)
        # oracle: sort (weight, index) pairs, take the first L
        w = [abs(delta - (1.0 - np.prod([p[k] for k in range(M) if cov[j, k] > 0]))) for j in range(E)]
        ref = [j for _, j in sorted(zip(w, range(E)))][:L]
        np.testing.assert_allclose(cs.weights, [w[j] for j in ref], atol=1e-12)
        inside = set(cs.exercises.tolist())
        outside = [w[j] for j in range(E) if j not in inside]
        if outside:
            assert max(cs.weights) <= min(outside) + 1e-12
        again = build_candidate_set("s", p, cat, delta, L)
        np.testing.assert_array_equal(cs.exercises, again.exercises)


def test_candidates_csv(tmp_path):
    cat = _catalog(np.eye(3))
    cs = build_candidate_set("s", [0.4, 0.3, 0.6], cat, 0.7, 2)
    write_candidates_csv([cs], cat, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["student_id", "rank", "exercise_id", "weight", "difficulty"]
    assert [r[2] for r in rows[1:]] == ["x001", "x000"]
