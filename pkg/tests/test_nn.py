from __future__ import annotations

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dvdet.errors import CheckpointError, DomainError
from dvdet.nn import (
    CHECKPOINT_MAGIC,
    ParamStore,
    adam_step,
    cosine_lr,
    cross_entropy,
    dropout_mask,
    elu,
    finite_diff_grad,
    leaky_relu,
    load_checkpoint,
    make_rng,
    max_relative_error,
    one_hot,
    save_checkpoint,
    sigmoid,
    softmax,
)
from oracles import cross_entropy_reference, elu_scalar, softmax_naive

FINITE = st.floats(-30, 30, allow_nan=False)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300

    def test_empty(self):
        with pytest.raises(DomainError):
            softmax([])

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_naive(self, seed):
        v = np.random.default_rng(seed).normal(size=5) * 3
        assert np.max(np.abs(softmax(v) - softmax_naive(v))) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(v=arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e4, 1e4)))
    def test_sums_to_one(self, v):
        p = softmax(v)
        assert abs(p.sum() - 1.0) < 1e-9 and np.all(p >= 0)

    def test_rows(self):
        m = np.array([[1.0, 2.0], [0.0, 0.0]])
        assert np.allclose(softmax(m, axis=1).sum(axis=1), 1.0)


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy(one_hot(1, 3), one_hot(1, 3)) == 0.0

    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_uniform(self, k):
        assert cross_entropy(np.full(k, 1 / k), one_hot(0, k)) == pytest.approx(math.log(k), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_formula(self, seed):
        rng = np.random.default_rng(seed)
        p = softmax(rng.normal(size=4))
        y = one_hot(int(rng.integers(4)), 4)
        assert abs(cross_entropy(p, y) - cross_entropy_reference(p, y)) < 1e-10

    def test_clamped(self):
        assert cross_entropy(np.array([1.0, 0.0]), one_hot(1, 2)) == pytest.approx(-math.log(1e-12))

    @pytest.mark.parametrize(
        "p,y",
        [([0.5, 0.5], [1, 0, 0]), ([0.6, 0.6], [1, 0]), ([0.5, 0.5], [1, 1]), ([0.5, 0.5], [0.5, 0])],
    )
    def test_bad_inputs(self, p, y):
        with pytest.raises(DomainError):
            cross_entropy(np.array(p), np.array(y, dtype=float))

    def test_one_hot_range(self):
        with pytest.raises(DomainError):
            one_hot(3, 3)


class TestActivations:
    @settings(max_examples=100, deadline=None)
    @given(x=FINITE)
    def test_elu(self, x):
        assert float(elu(np.array(x))) == pytest.approx(elu_scalar(x), abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(x=st.floats(-700, 700))
    def test_sigmoid(self, x):
        assert float(sigmoid(np.array(x))) == pytest.approx(1 / (1 + math.exp(-x)), rel=1e-12, abs=1e-300)

    def test_leaky(self):
        assert leaky_relu(np.array([-2.0, 3.0]), 0.2).tolist() == [-0.4, 3.0]


def scalar_store(w: float) -> ParamStore:
    s = ParamStore()
    s.add("w", np.array(w))
    return s


class TestAdam:
    def test_first_step_hand_computed(self):
        s = scalar_store(1.0)
        s["w"].grad = np.array(1.0)
        adam_step(s, 0.01, 1)
        # m = 0.1, v = 0.001; m_hat = 1, v_hat = 1
        m_hat, v_hat = 0.1 / (1 - 0.9), 0.001 / (1 - 0.999)
        assert float(s.value("w")) == pytest.approx(1.0 - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8), abs=1e-15)
        assert float(s.value("w")) == pytest.approx(0.99, abs=1e-9)
        assert float(s["w"].grad) == 0.0

    def test_zero_grad_no_move(self):
        s = ParamStore()
        s.add("a", np.arange(6.0).reshape(2, 3))
        adam_step(s, 0.01, 1)
        assert s.value("a").tolist() == np.arange(6.0).reshape(2, 3).tolist()
        assert s.value("a").shape == (2, 3)

    def test_two_steps_monotone(self):
        s = scalar_store(0.0)
        ws = [0.0]
        m = v = 0.0
        for t in (1, 2):
            s["w"].grad = np.array(-2.0)
            adam_step(s, 0.01, t)
            m = 0.9 * m + 0.1 * -2.0
            v = 0.999 * v + 0.001 * 4.0
            expect = ws[-1] - 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert float(s.value("w")) == pytest.approx(expect, abs=1e-15)
            ws.append(float(s.value("w")))
        assert ws[0] < ws[1] < ws[2]

    def test_bad_step(self):
        with pytest.raises(DomainError):
            adam_step(scalar_store(0.0), 0.01, 0)

    def test_missing_grad_names_param(self):
        s = scalar_store(0.0)
        s["w"].grad = None
        with pytest.raises(ValueError, match="'w'"):
            adam_step(s, 0.01, 1)


class TestCosine:
    def test_examples(self):
        assert cosine_lr(0, 10, 0.01) == 0.01
        assert cosine_lr(10, 10, 0.01) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(5, 10, 0.01) == pytest.approx(0.005, abs=1e-15)

    @given(total=st.integers(1, 500), data=st.data())
    def test_monotone_and_bounded(self, total, data):
        step = data.draw(st.integers(0, total - 1))
        a, b = cosine_lr(step, total, 1.0), cosine_lr(step + 1, total, 1.0)
        assert 0.0 <= b <= a <= 1.0

    @pytest.mark.parametrize("step,total", [(-1, 5), (6, 5), (0, 0)])
    def test_out_of_range(self, step, total):
        with pytest.raises(DomainError):
            cosine_lr(step, total, 0.01)


class TestDropout:
    def test_rate_zero(self):
        assert np.all(dropout_mask((4, 5), 0.0, make_rng(1)) == 1.0)

    def test_eval(self):
        assert np.all(dropout_mask(100, 0.9, make_rng(1), training=False) == 1.0)

    def test_keep_fraction(self):
        m = dropout_mask(10_000, 0.5, make_rng(7))
        assert abs(np.mean(m > 0) - 0.5) <= 0.02
        assert set(np.unique(m).tolist()) == {0.0, 2.0}

    def test_bad_rate(self):
        with pytest.raises(DomainError):
            dropout_mask(3, 1.0)

    def test_replayable(self):
        assert np.array_equal(dropout_mask(50, 0.5, make_rng(3)), dropout_mask(50, 0.5, make_rng(3)))
        assert np.array_equal(dropout_mask(50, 0.5, 3), dropout_mask(50, 0.5, make_rng(3)))


class TestFiniteDiff:
    def test_half_square(self):
        s = ParamStore()
        s.add("w", np.array([1.0, -2.0, 0.5]))
        s.add("M", np.arange(4.0).reshape(2, 2))
        f = lambda st_: 0.5 * sum(float(np.sum(st_.value(n) ** 2)) for n in st_)
        g = finite_diff_grad(f, s)
        for name in s:
            assert np.max(np.abs(g[name] - s.value(name))) < 1e-6

    def test_constant(self):
        s = scalar_store(3.0)
        assert float(finite_diff_grad(lambda _: 4.0, s)["w"]) == 0.0

    def test_restores_values(self):
        s = scalar_store(0.1)
        finite_diff_grad(lambda st_: float(np.sin(st_.value("w"))), s)
        assert float(s.value("w")) == 0.1

    def test_relative_error(self):
        assert max_relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-12])) < 1e-3
        assert max_relative_error(np.array([2.0]), np.array([1.0])) == 0.5


class TestCheckpoint:
    def make(self):
        s = ParamStore()
        rng = make_rng(5)
        s.add("W", rng.normal(size=(3, 4)))
        s.add("b", rng.normal(size=4))
        s.add("scalar", np.array(2.5))
        return s

    def test_round_trip_bit_exact(self, tmp_path):
        s = self.make()
        save_checkpoint(tmp_path / "m.ckpt", s, {"classes": ["a", "b"]})
        got, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"classes": ["a", "b"]}
        assert got.names() == s.names()
        for n in s:
            assert got.value(n).shape == s.value(n).shape
            assert got.value(n).tobytes() == s.value(n).tobytes()
        save_checkpoint(tmp_path / "again.ckpt", got, meta)
        assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes()

    def test_header_layout(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", scalar_store(1.0))
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:8] == CHECKPOINT_MAGIC
        version, meta_len = struct.unpack_from("<II", raw, 8)
        assert version == 1 and raw[16 : 16 + meta_len] == b"{}"
        assert raw[-8:] == struct.pack("<d", 1.0)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_bad_version(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(CHECKPOINT_MAGIC + struct.pack("<II", 9, 0))
        with pytest.raises(CheckpointError, match="version 9"):
            load_checkpoint(tmp_path / "x.ckpt")

    @pytest.mark.parametrize("cut", [10, 30, -3])
    def test_truncated(self, tmp_path, cut):
        save_checkpoint(tmp_path / "m.ckpt", self.make())
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_trailing_bytes(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", self.make())
        (tmp_path / "t.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes() + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "t.ckpt")


class TestStore:
    def test_duplicate(self):
        s = scalar_store(0.0)
        with pytest.raises(KeyError):
            s.add("w", np.zeros(1))

    def test_copy_is_deep(self):
        s = scalar_store(1.0)
        c = s.copy()
        c.value("w")[...] = 5.0
        assert float(s.value("w")) == 1.0

    def test_rng_replay(self):
        assert make_rng(9).random(4).tolist() == make_rng(9).random(4).tolist()
        assert make_rng(9).random(4).tolist() != make_rng(10).random(4).tolist()
