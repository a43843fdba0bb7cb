"""Kernel-layer tests: tensor wrapper, counter, and the numeric primitives."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cft.errors import InvalidValueError, ShapeError
from cft.tensor import (
    DenseTensor,
    OpCounter,
    as_tensor,
    gelu,
    layer_norm,
    matmul,
    softmax_rows,
)


class TestDenseTensor:
    def test_stores_float32_row_major(self):
        t = DenseTensor([[1, 2], [3, 4]])
        assert t.array.dtype == np.float32
        assert t.shape == (2, 2)
        assert t.array.flags["C_CONTIGUOUS"]

    def test_is_immutable(self):
        t = DenseTensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.array[0] = 9.0

    def test_scalar_becomes_rank_one(self):
        assert DenseTensor(3.5).shape == (1,)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            DenseTensor(np.zeros((2, 0)))

    def test_equality_and_hash(self):
        a, b = DenseTensor([1, 2]), DenseTensor([1.0, 2.0])
        assert a == b and hash(a) == hash(b)
        assert a != DenseTensor([1, 3])

    def test_zeros_and_tolist(self):
        z = DenseTensor.zeros((2, 3))
        assert z.tolist() == [[0.0] * 3] * 2
        assert as_tensor(z) is z


class TestOpCounter:
    def test_accumulates(self):
        c = OpCounter()
        c.add(5)
        c.add(7)
        assert c.mul_adds == 12

    def test_negative_rejected(self):
        with pytest.raises(InvalidValueError):
            OpCounter().add(-1)

    def test_sections_nest_and_restore(self):
        c = OpCounter()
        with c.section("outer"):
            c.add(10)
            with c.section("inner"):
                c.add(3)
            c.add(1)
        c.add(100)  # unlabeled
        assert c.sections == {"outer": 11, "inner": 3}
        assert c.mul_adds == 114
        assert c.section_total("outer", "inner") == 14
        assert c.section_total("missing") == 0


def test_matmul_value_and_count():
    a = DenseTensor([[1, 2, 3], [4, 5, 6]])
    b = DenseTensor([[1, 0], [0, 1], [1, 1]])
    c = OpCounter()
    out = matmul(a, b, c)
    assert out.tolist() == [[4.0, 5.0], [10.0, 11.0]]
    assert c.mul_adds == 2 * 2 * 3


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(DenseTensor([[1, 2]]), DenseTensor([[1, 2]]))
    with pytest.raises(ShapeError):
        matmul(DenseTensor([1, 2]), DenseTensor([[1], [2]]))


def test_matmul_accumulates_in_double():
    # Catastrophic cancellation case: f32 accumulation would lose the 1.0.
    a = DenseTensor([[1e8, 1.0, -1e8]])
    b = DenseTensor([[1.0], [1.0], [1.0]])
    assert matmul(a, b).array[0, 0] == 1.0


class TestSoftmax:
    def test_rows_sum_to_one(self):
        m = DenseTensor([[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]])
        s = softmax_rows(m).array
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)
        assert (s > 0).all()

    def test_large_values_stable(self):
        s = softmax_rows(DenseTensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(s.array, [[0.5, 0.5]], atol=1e-7)

    def test_nan_rejected(self):
        with pytest.raises(InvalidValueError):
            softmax_rows(DenseTensor(np.array([[np.nan, 1.0]])))

    def test_requires_matrix(self):
        with pytest.raises(ShapeError):
            softmax_rows(DenseTensor([1.0, 2.0]))

    @given(st.lists(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
                    min_size=1, max_size=5).filter(
                        lambda rows: len({len(r) for r in rows}) == 1))
    @settings(max_examples=60, deadline=None)
    def test_simplex_property(self, rows):
        s = softmax_rows(DenseTensor(rows)).array
        assert (s >= 0).all()
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_standardizes_rows(self):
        x = DenseTensor([[1.0, 2.0, 3.0, 4.0]])
        gain = DenseTensor(np.ones(4))
        bias = DenseTensor(np.zeros(4))
        out = layer_norm(x, gain, bias, 1e-6).array
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-3)

    def test_affine_applies(self):
        x = DenseTensor([[2.0, 4.0]])
        out = layer_norm(x, DenseTensor([3.0, 3.0]), DenseTensor([1.0, 1.0]), 1e-6)
        np.testing.assert_allclose(out.array, [[-2.0, 4.0]], atol=1e-4)

    def test_eps_must_be_positive(self):
        x = DenseTensor([[1.0, 2.0]])
        one = DenseTensor([1.0, 1.0])
        with pytest.raises(InvalidValueError):
            layer_norm(x, one, one, 0.0)

    def test_gain_shape_checked(self):
        x = DenseTensor([[1.0, 2.0]])
        with pytest.raises(ShapeError):
            layer_norm(x, DenseTensor([1.0]), DenseTensor([0.0, 0.0]), 1e-6)


class TestGelu:
    def test_zero_fixed_point(self):
        assert gelu(DenseTensor([0.0])).array[0] == 0.0

    def test_reference_value_at_one(self):
        # tanh-approximation form, checked against a high-precision
        # evaluation of the same expression ...
        got = float(gelu(DenseTensor([1.0])).array[0])
        assert abs(got - 0.8411919906082768) <= 1e-6
        # ... and against the exact-erf definition, which differs from the
        # tanh form by ~1.5e-4 at this point.
        exact = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert abs(got - exact) <= 2e-4

    def test_reflection_identity(self):
        # gelu(x) - gelu(-x) == x, since the underlying CDF satisfies
        # F(x) + F(-x) == 1
        x = np.linspace(-4, 4, 41, dtype=np.float32)
        s = gelu(DenseTensor(x)).array - gelu(DenseTensor(-x)).array
        np.testing.assert_allclose(s, x, atol=1e-5)

    def test_asymptotes(self):
        out = gelu(DenseTensor([-20.0, 20.0])).array
        np.testing.assert_allclose(out, [0.0, 20.0], atol=1e-6)
