import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hfclab.errors import NotPDError, ShapeError
from hfclab.tensor import cholesky, log_sum_exp, mahalanobis_sq, make_rng, mat_mul, softmax


def _triple_loop(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            for k in range(len(b)):
                out[i][j] += a[i][k] * b[k][j]
    return out


def test_mat_mul_examples():
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(mat_mul(np.eye(2), b), b)
    assert np.array_equal(mat_mul(b, np.zeros((2, 3))), np.zeros((2, 3)))
    assert mat_mul([[1, 2], [3, 4]], b).tolist() == [[19.0, 22.0], [43.0, 50.0]]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_mat_mul_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    assert np.allclose(mat_mul(a, b), _triple_loop(a.tolist(), b.tolist()), rtol=1e-12, atol=1e-12)


def test_mat_mul_shape_error():
    with pytest.raises(ShapeError):
        mat_mul(np.ones((2, 3)), np.ones((2, 3)))


def test_cholesky_examples():
    assert np.array_equal(cholesky(np.eye(3)).lower, np.eye(3))
    assert np.array_equal(cholesky(np.diag([4.0, 9.0])).lower, np.diag([2.0, 3.0]))
    with pytest.raises(NotPDError) as info:
        cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))
    assert info.value.pivot == 1


def test_cholesky_rejects_asymmetric():
    with pytest.raises(ShapeError):
        cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


@pytest.mark.parametrize("d", [1, 2, 5, 16, 32])
def test_cholesky_reconstruction(d):
    rng = np.random.default_rng(d)
    a = rng.normal(size=(d, d))
    s = a @ a.T + np.eye(d)
    f = cholesky(s)
    assert np.all(np.diag(f.lower) > 0)
    assert np.allclose(np.triu(f.lower, 1), 0)
    assert np.linalg.norm(f.reconstruct() - s) / np.linalg.norm(s) < 1e-8
    assert np.isclose(f.logdet(), np.linalg.slogdet(s)[1], rtol=1e-10)


def test_mahalanobis_examples():
    eye = cholesky(np.eye(2))
    assert mahalanobis_sq(np.array([3.0, 4.0]), np.zeros(2), eye) == pytest.approx(25.0)
    assert mahalanobis_sq(np.ones(2), np.ones(2), eye) == 0.0
    assert mahalanobis_sq(np.array([2.0, 1.0]), np.zeros(2), cholesky(np.diag([4.0, 1.0]))) == pytest.approx(2.0)


@pytest.mark.parametrize("d", [1, 3, 8, 32])
def test_mahalanobis_matches_explicit_inverse(d):
    rng = np.random.default_rng(100 + d)
    a = rng.normal(size=(d, d))
    s = a @ a.T + np.eye(d)
    v, mu = rng.normal(size=(6, d)), rng.normal(size=d)
    want = np.einsum("ni,ij,nj->n", v - mu, np.linalg.inv(s), v - mu)
    assert np.allclose(mahalanobis_sq(v, mu, cholesky(s)), want, rtol=1e-8)
    assert mahalanobis_sq(v[0], mu, cholesky(s)) == pytest.approx(want[0], rel=1e-8)


def test_mahalanobis_shape_error():
    with pytest.raises(ShapeError):
        mahalanobis_sq(np.ones(3), np.zeros(2), cholesky(np.eye(2)))


def test_softmax_and_lse_examples():
    assert np.allclose(softmax(np.zeros(2)), [0.5, 0.5])
    v = np.array([0.5, -1.25, 2.0])  # dyadic, so v + 1000 is exact
    assert np.array_equal(softmax(v + 1000.0), softmax(v))
    assert log_sum_exp(np.zeros(2)) == pytest.approx(np.log(2.0), abs=1e-15)
    with pytest.raises(ShapeError):
        softmax(np.array([]))
    with pytest.raises(ShapeError):
        log_sum_exp(np.array([]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_properties(v):
    p = softmax(v)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)
    assert p[np.argmax(v)] == p.max()
    assert log_sum_exp(v) == pytest.approx(np.log(np.exp(v).sum()), rel=1e-12, abs=1e-12)


def test_rng_stream_reproducible():
    a = make_rng(42).random(1000)
    b = make_rng(42).random(1000)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, make_rng(43).random(1000))
    assert isinstance(make_rng(0).bit_generator, np.random.Philox)
