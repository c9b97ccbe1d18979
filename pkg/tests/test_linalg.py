from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probex.errors import DegenerateInputError, DimensionError
from probex.linalg import contract3, cosine_sim, make_rng, matmul, pairwise_l2, quantile, relu, relu_grad


def loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def loop_contract3(w, x):
    y = np.zeros(w.shape[2])
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            for k in range(w.shape[2]):
                y[k] += w[i, j, k] * x[i, j]
    return y


def test_matmul_examples(rng):
    a = rng.standard_normal((3, 4))
    assert np.array_equal(matmul(np.eye(3), a), a)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), np.array([[3.0], [7.0]]))
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.max(np.abs(matmul(a, b) - loop_matmul(a, b))) <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity(rng):
    for _ in range(20):
        a, b, c = rng.standard_normal((4, 6)), rng.standard_normal((6, 5)), rng.standard_normal((5, 3))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9 * np.max(np.abs(left))


def test_contract3_examples(rng):
    x = rng.standard_normal((4, 5))
    assert np.array_equal(contract3(np.zeros((4, 5, 3)), x), np.zeros(3))
    w = np.zeros((4, 5, 3))
    w[2, 1, 0] = 1.0
    assert np.array_equal(contract3(w, x), np.array([x[2, 1], 0.0, 0.0]))
    w = rng.standard_normal((4, 5, 3))
    assert np.max(np.abs(contract3(w, x) - loop_contract3(w, x))) <= 1e-12
    # reshape oracle
    assert np.max(np.abs(contract3(w, x) - x.reshape(1, -1) @ w.reshape(20, 3))) <= 1e-12


def test_contract3_shape_error():
    with pytest.raises(DimensionError):
        contract3(np.zeros((4, 5, 3)), np.zeros((5, 4)))


def test_relu_and_grad():
    assert np.array_equal(relu([-1, 0, 2]), np.array([0.0, 0.0, 2.0]))
    assert np.array_equal(relu_grad([-1, 0, 2]), np.array([0.0, 0.0, 1.0]))


def test_cosine_sim(rng):
    a = rng.standard_normal(7)
    assert cosine_sim(a, a) == pytest.approx(1.0, abs=1e-15)
    assert cosine_sim(a, -a) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        cosine_sim(np.zeros(3), np.ones(3))


def test_quantile_matches_sort_oracle(rng):
    v = np.arange(1, 101, dtype=float)
    rng.shuffle(v)
    # type-7 median of 1..100 is the mean of the 50th and 51st order statistics
    assert quantile(v, 0.5) == 50.5
    assert quantile(v, 0.0) == 1.0 and quantile(v, 1.0) == 100.0
    w = rng.standard_normal(57)
    for q in (0.1, 0.25, 0.5, 0.75, 0.9, 0.33):
        assert quantile(w, q) == pytest.approx(np.quantile(w, q), abs=1e-12)
    with pytest.raises(DegenerateInputError):
        quantile([], 0.5)


def test_pairwise_l2_exact_properties(rng):
    rows = [rng.standard_normal((3, 4)) for _ in range(6)]
    d = pairwise_l2(rows)
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0.0)
    assert np.all(d >= 0)
    assert d[1, 4] == pytest.approx(np.linalg.norm(rows[1] - rows[4]), rel=1e-12)
    with pytest.raises(DimensionError):
        pairwise_l2([np.zeros((2, 2)), np.zeros((2, 3))])


def test_rng_reproducible_and_split():
    a = make_rng(42).standard_normal(10_000)
    b = make_rng(42).standard_normal(10_000)
    assert np.array_equal(a, b)
    c = make_rng(42, 1).standard_normal(10_000)
    assert not np.array_equal(a, c)
    assert np.array_equal(make_rng(42, 1, 2).integers(0, 1 << 30, 100), make_rng(42, 1, 2).integers(0, 1 << 30, 100))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_contract3_linear_in_x(a, b, c, seed):
    g = np.random.default_rng(seed)
    w = g.standard_normal((a, b, c))
    x1, x2 = g.standard_normal((a, b)), g.standard_normal((a, b))
    lhs = contract3(w, 2.0 * x1 - 0.5 * x2)
    rhs = 2.0 * contract3(w, x1) - 0.5 * contract3(w, x2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10
