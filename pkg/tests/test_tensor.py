# type: ignore

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svgsim.tensor import (ShapeError, InvariantError, matmul, softmax_rows, gaussian_matrix,
                           error_stats, check_finite, derive_seed, get_dtype)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


def test_matmul_identity():
    m = gaussian_matrix(2, 3, 1)
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_hand():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
    assert out.tolist() == [[17.0], [39.0]]


def test_matmul_naive_oracle():
    a = gaussian_matrix(7, 5, 2)
    b = gaussian_matrix(5, 3, 3)
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


@pytest.mark.parametrize("tile", [1, 3, 8, 1 << 16])
def test_matmul_row_bands(monkeypatch, tile):
    monkeypatch.setattr("svgsim.tensor.MATMUL_TILE_ELEMENTS", tile)
    a = gaussian_matrix(11, 6, 7)
    c = gaussian_matrix(4, 6, 8)
    assert np.array_equal(matmul(a, c.T), naive_matmul(a, c.T))


def test_matmul_independent_of_neighbours():
    a = gaussian_matrix(300, 16, 9)
    b = gaussian_matrix(16, 500, 10)
    full = matmul(a, b)
    rows = np.array([0, 17, 123, 299])
    cols = np.array([3, 250, 499])
    assert np.array_equal(matmul(a[rows], b), full[rows])
    assert np.array_equal(matmul(a, b[:, cols]), full[:, cols])
    assert np.array_equal(matmul(a[rows], b[:, cols]), full[np.ix_(rows, cols)])


def test_matmul_mixed_precision():
    a = gaussian_matrix(5, 4, 11, "float32")
    b = gaussian_matrix(4, 3, 12)
    out = matmul(a, b)
    assert out.dtype == np.float64
    assert np.array_equal(out, naive_matmul(a.astype(np.float64), b))


def test_matmul_empty_inner():
    assert np.array_equal(matmul(np.ones((2, 0)), np.ones((0, 3))), np.zeros((2, 3)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_keeps_float32():
    a = gaussian_matrix(3, 3, 1, "float32")
    assert matmul(a, a).dtype == np.float32


def test_matmul_associative_in_shape():
    a, b, c = (gaussian_matrix(8, 8, s) for s in (4, 5, 6))
    assert np.max(np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c)))) <= 1e-10


def test_softmax_uniform():
    out = softmax_rows(np.zeros((1, 3)))
    assert np.allclose(out, 1 / 3, rtol=0, atol=1e-15)


def test_softmax_large_logits():
    out = softmax_rows(np.array([[1000.0, 1000.0 + math.log(2)]]))
    assert out[0, 0] == pytest.approx(1 / 3, abs=1e-6)
    assert out[0, 1] == pytest.approx(2 / 3, abs=1e-6)


def test_softmax_naive_oracle():
    m = gaussian_matrix(4, 6, 7)
    e = np.exp(m)
    assert np.max(np.abs(softmax_rows(m) - e / e.sum(axis=1, keepdims=True))) <= 1e-12


@pytest.mark.parametrize("precision, tol", [("float32", 1e-6), ("float64", 1e-12)])
def test_softmax_rows_sum_to_one(precision, tol):
    m = gaussian_matrix(16, 32, 8, precision) * 400
    m[:, 0] = 800
    m[:, 1] = -800
    sums = softmax_rows(m).astype(np.float64).sum(axis=1)
    assert np.all(np.abs(sums - 1) <= tol)


def test_softmax_needs_columns():
    with pytest.raises(ShapeError):
        softmax_rows(np.zeros((2, 0)))


def test_gaussian_deterministic():
    assert np.array_equal(gaussian_matrix(3, 3, 42), gaussian_matrix(3, 3, 42))


def test_gaussian_moments():
    m = gaussian_matrix(1000, 1, 11)
    assert -0.15 <= m.mean() <= 0.15
    assert 0.8 <= m.var() <= 1.2


def test_gaussian_seed_sensitivity():
    assert not np.array_equal(gaussian_matrix(2, 2, 1), gaussian_matrix(2, 2, 2))


def test_gaussian_dtype():
    assert gaussian_matrix(2, 2, 1, "float32").dtype == np.float32
    assert get_dtype("float64") == np.float64
    with pytest.raises(ValueError):
        get_dtype("float16")


def test_gaussian_rejects_empty():
    with pytest.raises(ShapeError):
        gaussian_matrix(0, 2, 1)


def test_derive_seed():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)
    assert 0 <= derive_seed(5) < 2 ** 63


def test_error_stats_identical():
    x = gaussian_matrix(4, 4, 3)
    stats = error_stats(x, x)
    assert stats.mse == 0
    assert stats.psnr_db == 100.0
    assert stats.max_abs_diff == 0


def test_error_stats_20db():
    ref = np.array([[1.0, 0.0], [-0.5, 0.25]])
    stats = error_stats(ref, ref + 0.1)
    assert stats.mse == pytest.approx(0.01)
    assert stats.psnr_db == pytest.approx(20.0)
    assert stats.max_abs_diff == pytest.approx(0.1)


def test_error_stats_naive_mse():
    a, b = gaussian_matrix(5, 6, 1), gaussian_matrix(5, 6, 2)
    expected = sum((float(x) - float(y)) ** 2 for x, y in zip(a.flat, b.flat)) / a.size
    assert error_stats(a, b).mse == pytest.approx(expected, rel=1e-12)


def test_error_stats_zero_reference():
    stats = error_stats(np.zeros((2, 2)), np.full((2, 2), 0.1))
    assert stats.psnr_db == pytest.approx(20.0)


def test_error_stats_underflow_caps():
    stats = error_stats(np.array([[1.0, 0.0]]), np.array([[1.0, 1e-160]]))
    assert stats.mse > 0
    assert stats.psnr_db == 100.0


def test_error_stats_shape_mismatch():
    with pytest.raises(ShapeError):
        error_stats(np.zeros((2, 2)), np.zeros((2, 3)))


def test_check_finite():
    check_finite(np.ones((2, 2)), "x")
    with pytest.raises(InvariantError):
        check_finite(np.array([[np.nan]]), "x")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32))
def test_error_stats_self_is_zero(rows, cols, seed):
    x = gaussian_matrix(rows, cols, seed)
    assert error_stats(x, x).mse == 0
