"""Kronecker-factored Fisher blocks with factored Tikhonov damping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import SymEig, kron, sym_eig
from .network import BatchCache, Network


class NonSPDFactorError(ValueError):
    """A damped Kronecker factor is not positive definite (e.g. zero damping on a rank-deficient factor)."""


@dataclass(frozen=True)
class KfacBlock:
    index: int
    offset: int
    A: np.ndarray
    G: np.ndarray
    pi: float
    lam: float
    eig_A: SymEig  # of A + pi sqrt(lam) I
    eig_G: SymEig  # of G + sqrt(lam) / pi I

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the layer's weight matrix, (dim G, dim A)."""
        return (self.G.shape[0], self.A.shape[0])

    @property
    def size(self) -> int:
        return self.A.shape[0] * self.G.shape[0]

    def damped_factors(self) -> tuple[np.ndarray, np.ndarray]:
        return self.eig_A.reconstruct(), self.eig_G.reconstruct()

    def dense(self) -> np.ndarray:
        """Explicit damped block ``A_damped kron G_damped`` (tests and small problems only)."""
        Ad, Gd = self.damped_factors()
        return kron(Ad, Gd)

    def eigenvalues(self) -> np.ndarray:
        return np.sort(np.outer(self.eig_A.eigenvalues, self.eig_G.eigenvalues).ravel())

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        """``(A_damped kron G_damped)^{-1} x`` via ``vec(G^{-1} MAT(x) A^{-1})``."""
        X = np.asarray(x, dtype=float)
        rows, cols = self.shape
        single = X.ndim == 1
        Xs = X[:, None] if single else X
        UA, sA = self.eig_A.eigenvectors, self.eig_A.eigenvalues
        UG, sG = self.eig_G.eigenvectors, self.eig_G.eigenvalues
        out = np.empty_like(Xs, dtype=float)
        for k in range(Xs.shape[1]):
            M = Xs[:, k].reshape(rows, cols, order="F")
            # rotate into both eigenbases, scale elementwise, rotate back
            core = (UG.T @ M @ UA) / np.outer(sG, sA)
            out[:, k] = (UG @ core @ UA.T).reshape(-1, order="F")
        return out[:, 0] if single else out

    def smallest_eigvec(self) -> np.ndarray:
        """Unit eigenvector of the smallest eigenvalue of the damped block.

        Ties resolve to the first eigenvector returned by the symmetric solver;
        the sign makes the first significant entry positive.
        """
        v = np.kron(self.eig_A.eigenvectors[:, 0], self.eig_G.eigenvectors[:, 0])
        v = v / np.linalg.norm(v)
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        return v


def estimate_factors(cache: BatchCache, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Second moments of extended activations (A) and pre-activation derivatives (G)."""
    if cache.g is None:
        raise ValueError("cache has no pre-activation derivatives; run backward first")
    abar, g = cache.abar[i], cache.g[i]
    B = abar.shape[0]
    if B == 0:
        raise ValueError("cannot estimate Kronecker factors from an empty batch")
    if abar.ndim == 2:
        A = abar.T @ abar / B
        G = g.T @ g / B
    else:
        T = abar.shape[1]
        a2 = abar.reshape(B * T, -1)
        g2 = g.reshape(B * T, -1)
        A = a2.T @ a2 / B           # sum over locations, mean over samples
        G = g2.T @ g2 / (B * T)     # mean over locations and samples
    return 0.5 * (A + A.T), 0.5 * (G + G.T)


def damping_pi(A: np.ndarray, G: np.ndarray) -> float:
    """Trace-ratio balance between the two factors; 1 when ``tr(G) == 0``."""
    trG = float(np.trace(G)) / G.shape[0]
    if trG <= 0.0:
        return 1.0
    trA = float(np.trace(A)) / A.shape[0]
    if trA <= 0.0:
        return 1.0
    return float(np.sqrt(trA / trG))


def make_block(A: np.ndarray, G: np.ndarray, lam: float, index: int = 0, offset: int = 0) -> KfacBlock:
    pi = damping_pi(A, G)
    root = np.sqrt(lam)
    eig_A = sym_eig(A + pi * root * np.eye(A.shape[0]))
    eig_G = sym_eig(G + root / pi * np.eye(G.shape[0]))
    if eig_A.eigenvalues[0] <= 0.0 or eig_G.eigenvalues[0] <= 0.0:
        raise NonSPDFactorError(
            f"layer {index}: damped factors are not positive definite "
            f"(min eigenvalues {eig_A.eigenvalues[0]:.3g}, {eig_G.eigenvalues[0]:.3g}); increase the damping"
        )
    return KfacBlock(index=index, offset=offset, A=A, G=G, pi=pi, lam=float(lam), eig_A=eig_A, eig_G=eig_G)


def build_blocks(net: Network, cache: BatchCache, lam: float) -> list[KfacBlock]:
    blocks = []
    for i in range(len(net.layers)):
        A, G = estimate_factors(cache, i)
        blocks.append(make_block(A, G, lam, index=i, offset=int(net.offsets[i])))
    return blocks


def kfac_apply_inverse(blocks: list[KfacBlock], grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=float)
    total = sum(b.size for b in blocks)
    if grad.shape != (total,):
        raise ValueError(f"gradient has shape {grad.shape}, blocks cover {total} parameters")
    out = np.empty_like(grad)
    for b in blocks:
        sl = slice(b.offset, b.offset + b.size)
        out[sl] = b.apply_inverse(grad[sl])
    return out


def smallest_eigvec_block(block: KfacBlock) -> np.ndarray:
    return block.smallest_eigvec()
