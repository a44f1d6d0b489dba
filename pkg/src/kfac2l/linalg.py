"""Dense kernels shared by the rest of the package.

Vectors of matrices always follow the column-major ``vec`` convention:
``vec(X)`` stacks the columns of ``X``, and ``mat`` undoes it.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when an SPD solve fails even after jitter escalation."""


class SymEig(NamedTuple):
    eigenvalues: np.ndarray   # ascending
    eigenvectors: np.ndarray  # orthonormal columns

    def reconstruct(self) -> np.ndarray:
        U, s = self.eigenvectors, self.eigenvalues
        return (U * s) @ U.T


def vec(X: np.ndarray) -> np.ndarray:
    return np.asarray(X).reshape(-1, order="F")


def mat(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    x = np.asarray(x)
    if x.size != rows * cols:
        raise ValueError(f"cannot reshape vector of length {x.size} into {rows}x{cols}")
    return x.reshape(rows, cols, order="F")


def kron(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` of the result is ``A[i, j] * B``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    mA, nA = A.shape
    mB, nB = B.shape
    out = A[:, None, :, None] * B[None, :, None, :]
    return out.reshape(mA * mB, nA * nB)


def kron_matvec(A: np.ndarray, B: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Compute ``kron(A, B) @ x`` as ``vec(B @ mat(x) @ A.T)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != A.shape[1] * B.shape[1]:
        raise ValueError(
            f"x has length {x.size}, expected {A.shape[1]} * {B.shape[1]} = {A.shape[1] * B.shape[1]}"
        )
    X = mat(x, B.shape[1], A.shape[1])
    return vec(B @ X @ A.T)


def _normalize_signs(U: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    # first component above tol in each column made positive
    U = U.copy()
    for j in range(U.shape[1]):
        col = U[:, j]
        idx = np.flatnonzero(np.abs(col) > tol * max(np.abs(col).max(), 1.0))
        if idx.size and col[idx[0]] < 0:
            U[:, j] = -col
    return U


def sym_eig(A: np.ndarray) -> SymEig:
    """Eigendecomposition of the symmetric part of ``A``, eigenvalues ascending.

    Eigenvector signs are fixed so that the first significant component of each
    column is positive, which makes downstream spectral choices reproducible.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got shape {A.shape}")
    S = 0.5 * (A + A.T)
    w, U = np.linalg.eigh(S)
    return SymEig(w, _normalize_signs(U))


def solve_spd(A: np.ndarray, b: np.ndarray, jitter: float = 0.0, retries: int = 3) -> np.ndarray:
    """Solve ``(A + jitter I) x = b`` for symmetric positive definite ``A``.

    A failed Cholesky factorization is retried with the jitter raised tenfold
    (starting from ``1e-12 * mean(diag)`` when ``jitter`` is zero), at most
    ``retries`` times, before :class:`SingularMatrixError` is raised.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: A {A.shape}, b {b.shape}")
    S = 0.5 * (A + A.T)
    n = S.shape[0]
    eye = np.eye(n)
    current = float(jitter)
    for attempt in range(retries + 1):
        try:
            factor = scipy.linalg.cho_factor(S + current * eye, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError):
            if attempt == retries:
                break
            scale = abs(np.trace(S)) / max(n, 1) or 1.0
            current = current * 10.0 if current > 0 else 1e-12 * scale
            continue
        return scipy.linalg.cho_solve(factor, b, check_finite=False)
    raise SingularMatrixError(f"SPD solve failed after {retries} jitter escalations (last jitter {current:g})")
