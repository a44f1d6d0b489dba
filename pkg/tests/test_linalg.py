import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from kfac2l.linalg import SingularMatrixError, kron, kron_matvec, mat, solve_spd, sym_eig, vec

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def block_kron(A, B):
    # oracle: assemble block (i, j) = A[i, j] * B entry by entry
    mA, nA = A.shape
    mB, nB = B.shape
    out = np.zeros((mA * mB, nA * nB))
    for i in range(mA):
        for j in range(nA):
            for k in range(mB):
                for l in range(nB):
                    out[i * mB + k, j * nB + l] = A[i, j] * B[k, l]
    return out


def test_kron_identities():
    assert np.array_equal(kron(np.eye(2), np.eye(3)), np.eye(6))
    B = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(kron([[2.0]], B), 2 * B)


def test_kron_small_against_block_definition():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    B = np.array([[0.0, 1.0], [1.0, 0.0]])
    expected = np.array([[0, 1, 0, 2],
                         [1, 0, 2, 0],
                         [0, 3, 0, 4],
                         [3, 0, 4, 0]], dtype=float)
    assert np.array_equal(kron(A, B), expected)
    assert np.array_equal(kron(A, B), block_kron(A, B))


@given(arrays(float, (2, 2), elements=finite), arrays(float, (2, 2), elements=finite),
       arrays(float, (2, 2), elements=finite))
def test_kron_associative(A, B, C):
    left, right = kron(kron(A, B), C), kron(A, kron(B, C))
    assert np.allclose(left, right, rtol=1e-12, atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_kron_matvec_matches_explicit(mA, nA, mB, nB, seed):
    r = np.random.default_rng(seed)
    A, B = r.standard_normal((mA, nA)), r.standard_normal((mB, nB))
    x = r.standard_normal(nA * nB)
    expected = block_kron(A, B) @ x
    assert np.allclose(kron_matvec(A, B, x), expected, rtol=1e-10, atol=1e-10)


def test_kron_matvec_examples(rng):
    x = rng.standard_normal(6)
    assert np.array_equal(kron_matvec(np.eye(3), np.eye(2), x), x)
    A, B = rng.standard_normal((3, 3)), rng.standard_normal((2, 2))
    assert np.allclose(kron_matvec(A, B, x), kron(A, B) @ x, rtol=0, atol=1e-12)
    a, b = np.array([1.0, 2.0, 3.0]), np.array([5.0, 7.0])
    assert np.allclose(kron_matvec(np.diag(a), np.diag(b), x), np.kron(a, b) * x)


def test_kron_matvec_rejects_bad_length():
    with pytest.raises(ValueError):
        kron_matvec(np.eye(2), np.eye(3), np.ones(5))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_vec_mat_roundtrip(rows, cols, seed):
    X = np.random.default_rng(seed).standard_normal((rows, cols))
    assert np.array_equal(mat(vec(X), rows, cols), X)
    assert np.array_equal(vec(X)[:rows], X[:, 0])  # columns are stacked


def test_sym_eig_examples():
    e = sym_eig(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(e.eigenvalues, [1, 2, 3])
    assert np.allclose(np.abs(e.eigenvectors), np.eye(3)[:, [1, 2, 0]])

    e = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(e.eigenvalues, [1.0, 3.0])
    # characteristic polynomial (2 - t)^2 - 1: t = 1 with (1, -1), t = 3 with (1, 1)
    assert np.allclose(e.eigenvectors[:, 0], np.array([1.0, -1.0]) / np.sqrt(2))
    assert np.allclose(e.eigenvectors[:, 1], np.array([1.0, 1.0]) / np.sqrt(2))

    assert np.array_equal(sym_eig(np.eye(4)).eigenvalues, np.ones(4))


@given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_sym_eig_roundtrip_and_orthonormality(n, seed):
    M = np.random.default_rng(seed).standard_normal((n, n))
    A = M + M.T
    e = sym_eig(A)
    U = e.eigenvectors
    assert np.all(np.diff(e.eigenvalues) >= 0)
    assert np.linalg.norm(e.reconstruct() - A) <= 1e-10 * max(np.linalg.norm(A), 1.0)
    assert np.allclose(U.T @ U, np.eye(n), atol=1e-10)


def test_sym_eig_symmetrizes_and_rejects_non_square():
    A = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert np.allclose(sym_eig(A).reconstruct(), [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        sym_eig(np.ones((2, 3)))


def test_solve_spd_examples(rng):
    b = rng.standard_normal(4)
    assert np.allclose(solve_spd(np.eye(4), b), b)
    assert np.allclose(solve_spd(np.diag([2.0, 4.0]), np.array([2.0, 8.0])), [1.0, 2.0])
    M = rng.standard_normal((5, 5))
    A = M.T @ M + np.eye(5)
    b = rng.standard_normal(5)
    x = solve_spd(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-8 * np.linalg.norm(b)


def test_solve_spd_with_jitter(rng):
    A = np.diag([1.0, 2.0])
    x = solve_spd(A, np.array([2.0, 3.0]), jitter=1.0)
    assert np.allclose(x, [1.0, 1.0])


def test_solve_spd_escalates_jitter_on_psd_matrix():
    # rank deficient PSD: Cholesky fails at jitter 0, succeeds after escalation
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    x = solve_spd(A, np.array([1.0, 1.0]))
    assert np.all(np.isfinite(x))


def test_solve_spd_raises_when_singular():
    A = -np.eye(3)
    with pytest.raises(SingularMatrixError):
        solve_spd(A, np.ones(3))
