import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exrec.datamodel import InteractionSequence
from exrec.enhancer import (
    Generator,
    SequenceEncoder,
    curriculum_weight,
    encode_sequence,
    enhance_representation,
    enhancer_loss,
)
from exrec.errors import ConfigError, EmptyInputError, ShapeError
from exrec.tensorkit import ParameterSet, lstm_forward


class _Fixed:
    """Generator stand-in returning a constant output."""

    def __init__(self, out):
        self.out = np.asarray(out, dtype=float)
        self.dim = len(self.out)

    def forward(self, r):
        return np.broadcast_to(self.out, np.atleast_2d(r).shape).copy(), None

    def __call__(self, r):
        return self.out.copy()


class TestCurriculum:
    def test_endpoints(self):
        assert curriculum_weight(0, 10, 5, 5, 50) == 0.0
        assert curriculum_weight(0, 10, 50, 5, 50) == pytest.approx(1.0, abs=1e-15)
        assert curriculum_weight(10, 10, 50, 5, 50) == pytest.approx(0.0, abs=1e-15)

    def test_mid_value(self):
        # argument pi/2 * (0.5 + 0.25)
        assert curriculum_weight(5, 10, 15, 5, 45) == pytest.approx(math.sin(0.375 * math.pi))

    def test_late_training_favours_shorter_sequences(self):
        assert curriculum_weight(10, 10, 10, 0, 100) > curriculum_weight(10, 10, 90, 0, 100)

    @settings(max_examples=80, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone_before_peak(self, a, b):
        lo, hi = sorted((a, b))
        # at epo=0 in len, at len=Lmin in epo; argument stays <= pi/2
        assert curriculum_weight(0, 1, lo, 0, 1) <= curriculum_weight(0, 1, hi, 0, 1)
        assert curriculum_weight(lo, 1, 0, 0, 1) <= curriculum_weight(hi, 1, 0, 0, 1)

    @settings(max_examples=80, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_range(self, e, l):
        assert 0.0 <= curriculum_weight(e, 1, l, 0, 1) <= 1.0

    def test_degenerate_range(self):
        assert curriculum_weight(2, 4, 7, 7, 7) == pytest.approx(math.sin(math.pi / 4))
        with pytest.raises(ValueError):
            curriculum_weight(2, 4, 8, 7, 7)
        with pytest.raises(ConfigError):
            curriculum_weight(0, 0, 1, 0, 2)
        with pytest.raises(ValueError):
            curriculum_weight(5, 4, 1, 0, 2)


class TestLoss:
    def test_spot_value(self):
        assert enhancer_loss([1.0, 0.0], [9.0, 9.0], _Fixed([0.0, 0.0]), 0.5) == pytest.approx(0.5)

    def test_zero_cases(self, rng):
        h = rng.normal(size=3)
        assert enhancer_loss(h, rng.normal(size=3), _Fixed(h), 1.0) == 0.0
        assert enhancer_loss(h, rng.normal(size=3), _Fixed(h + 5), 0.0) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0, 2))
    def test_nonnegative(self, h, w):
        rng = np.random.default_rng(0)
        gen = Generator(ParameterSet(), "g", 3, rng)
        assert enhancer_loss(h, rng.normal(size=3), gen, w) >= 0.0

    def test_errors(self, rng):
        gen = Generator(ParameterSet(), "g", 3, rng)
        with pytest.raises(ShapeError):
            enhancer_loss(np.zeros(3), np.zeros(2), gen, 1.0)
        with pytest.raises(ValueError):
            enhancer_loss(np.zeros(3), np.zeros(3), gen, -1.0)


class TestEnhance:
    def test_active_passthrough_is_identity(self, rng):
        h = rng.normal(size=4)
        out = enhance_representation(h, rng.normal(size=4), _Fixed(np.ones(4)), True, 0.6)
        assert out is h

    def test_inactive(self):
        out = enhance_representation(np.array([1.0, 0.0]), np.zeros(2), _Fixed([0.2, 0.4]), False, 0.5)
        np.testing.assert_allclose(out, [0.7, 0.4])
        out0 = enhance_representation(np.array([1.0, 0.0]), np.zeros(2), _Fixed([0.2, 0.4]), False, 0.0)
        np.testing.assert_array_equal(out0, [0.2, 0.4])


class TestEncoder:
    def _enc(self):
        return SequenceEncoder(ParameterSet(), "enc", 5, 3, 2, np.random.default_rng(0))

    def test_identical_sequences(self):
        enc = self._enc()
        a = InteractionSequence.from_arrays("a", [1, 2, 3], [1, 0, 1])
        b = InteractionSequence.from_arrays("b", [1, 2, 3], [1, 0, 1])
        R, _ = enc.forward([a, b])
        np.testing.assert_array_equal(R[0], R[1])

    def test_length_one_is_one_lstm_step(self):
        enc = self._enc()
        seq = InteractionSequence.from_arrays("a", [4], [1])
        x = np.concatenate([enc.embed.table.value[4], [1.0]])
        want = lstm_forward(enc.lstm, x[None])[0].hidden
        np.testing.assert_allclose(encode_sequence(enc, seq), want, atol=1e-14)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            self._enc().forward([InteractionSequence.from_arrays("a", [], [])])
