import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from turbos.errors import DimensionError, DomainError
from turbos.numerics import (
    Precision,
    decay_matrix,
    decay_matrix_reference,
    matmul,
    matmul_reference,
    rmsnorm,
    rmsnorm_reference,
    round_bf16,
    sigmoid,
    silu,
    softmax_lastdim,
    softplus,
    tensor,
)

finite32 = st.floats(-1e4, 1e4, allow_nan=False, width=32)


def test_matmul_identity(rng):
    x = tensor(rng.normal(size=(3, 5)))
    np.testing.assert_array_equal(matmul(tensor(np.eye(3)), x), x)


def test_matmul_hand_arithmetic():
    out = matmul(tensor([[1, 2], [3, 4]]), tensor([[0], [1]]))
    np.testing.assert_array_equal(out, [[2], [4]])


def test_matmul_vs_triple_loop(rng):
    a, b = tensor(rng.normal(size=(8, 8))), tensor(rng.normal(size=(8, 8)))
    assert np.abs(matmul(a, b) - matmul_reference(a, b)).max() <= 1e-5


def test_matmul_shape_and_precision_errors():
    with pytest.raises(DimensionError):
        matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        matmul(tensor(np.ones((2, 2))), tensor(np.ones((2, 2)), Precision.F64))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_transpose_law(m, k, n, seed):
    r = np.random.default_rng(seed)
    a = tensor(r.normal(size=(m, k)), Precision.F64)
    b = tensor(r.normal(size=(k, n)), Precision.F64)
    np.testing.assert_allclose(matmul(a, b).T, matmul(b.T.copy(), a.T.copy()), atol=1e-12)


def test_rmsnorm_trivial():
    d = 6
    np.testing.assert_allclose(rmsnorm(np.ones(d, np.float32), np.ones(d, np.float32), 1e-12), np.ones(d), atol=1e-6)
    assert not rmsnorm(np.zeros(d, np.float32), np.full(d, 3.0, np.float32)).any()


def test_rmsnorm_vs_direct(rng):
    x = rng.normal(size=(5, 16)).astype(np.float32)
    g = rng.normal(size=16).astype(np.float32)
    assert np.abs(rmsnorm(x, g) - rmsnorm_reference(x, g)).max() <= 1e-6
    with pytest.raises(DomainError):
        rmsnorm(x, g, 0.0)


def test_softmax_trivial():
    np.testing.assert_allclose(softmax_lastdim(np.zeros(3)), [1 / 3] * 3)
    np.testing.assert_array_equal(softmax_lastdim(np.array([0.7, -np.inf])), [1.0, 0.0])


def test_softmax_frozen():
    # e/(1+e) and 1/(1+e), evaluated at 40 significant digits
    got = softmax_lastdim(np.array([2.0, 1.0]))
    np.testing.assert_allclose(got, [0.7310585786300048792, 0.2689414213699951207], atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)))
def test_softmax_is_distribution(z):
    p = softmax_lastdim(z)
    assert np.all(p >= 0) and abs(p.sum() - 1.0) <= 1e-12


def test_silu_values():
    assert silu(0.0) == 0.0
    assert abs(silu(50.0) - 50.0) < 1e-9 and abs(silu(-50.0)) < 1e-9
    assert abs(silu(1.0) - 0.7310585786300048793) <= 1e-7


def test_sigmoid_softplus_extremes():
    assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0
    assert softplus(1000.0) == 1000.0 and np.isfinite(softplus(-1000.0))


def test_decay_matrix_trivial():
    np.testing.assert_array_equal(decay_matrix(np.zeros(3)), np.tril(np.ones((3, 3))))
    np.testing.assert_allclose(decay_matrix(np.log([0.5, 0.5])), [[1, 0], [0.5, 1]])


def test_decay_matrix_vs_products(rng):
    la = -rng.uniform(0, 1, size=16)
    assert np.abs(decay_matrix(la) - decay_matrix_reference(la)).max() <= 1e-6
    with pytest.raises(DomainError):
        decay_matrix(np.array([-0.1, 0.2]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-3, 0)), st.data())
def test_decay_matrix_chain(la, data):
    L = decay_matrix(la)
    T = la.shape[0]
    j = data.draw(st.integers(0, T - 1))
    k = data.draw(st.integers(j, T - 1))
    i = data.draw(st.integers(k, T - 1))
    assert math.isclose(L[i, j], L[i, k] * L[k, j], rel_tol=1e-9, abs_tol=1e-300)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.integers(1, 16), elements=finite32))
def test_bf16_idempotent_and_close(x):
    once = round_bf16(x)
    np.testing.assert_array_equal(round_bf16(once), once)
    assert np.all(np.abs(once - x) <= np.abs(x) * 2.0**-8 + 1e-38)


def test_bf16_ties_to_even():
    # 1 + 2^-8 sits exactly between two bf16 values; even mantissa wins
    assert round_bf16(np.float32(1 + 2**-8)) == np.float32(1.0)
    assert round_bf16(np.float32(1 + 3 * 2**-8)) == np.float32(1 + 2**-6)
    assert np.isnan(round_bf16(np.float32(np.nan)))
