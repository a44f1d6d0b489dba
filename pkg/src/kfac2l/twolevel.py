"""Coarse spaces, coarse operators and the two-level correction of a KFAC increment.

A coarse space is block diagonal: layer ``i`` contributes ``m_i`` orthonormal
columns ``V_i`` living in that layer's parameter segment. The correction adds
``R0^T beta`` to the KFAC increment, where ``beta`` solves the coarse system
``(R0 F_reg R0^T) beta = R0 r``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .fisher import FisherOracle
from .kfac import KfacBlock, kfac_apply_inverse
from .linalg import solve_spd

NICOLAIDES = "nicolaides"
SPECTRAL = "spectral"
KRYLOV_NICO = "krylov-nicolaides"
KRYLOV_RESIDU = "krylov-residuals"
RESIDUALS = "residuals"
TAYLOR = "taylor"
FULL_SPACE = "full-space"

DEPENDENCE_TOL = 1e-10


@dataclass(frozen=True)
class CoarseSpace:
    kind: str
    V: tuple[np.ndarray, ...]   # V[i] has shape (p_i, m_i)
    offsets: np.ndarray

    @property
    def widths(self) -> list[int]:
        return [v.shape[1] for v in self.V]

    @property
    def m(self) -> int:
        return sum(self.widths)

    @property
    def p(self) -> int:
        return int(self.offsets[-1])

    @property
    def coarse_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.widths)]).astype(int)

    def prolong(self, beta: np.ndarray) -> np.ndarray:
        """``R0^T beta``."""
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.m,):
            raise ValueError(f"beta has shape {beta.shape}, coarse space has width {self.m}")
        co = self.coarse_offsets
        return np.concatenate([V @ beta[co[i]:co[i + 1]] for i, V in enumerate(self.V)])

    def restrict(self, u: np.ndarray) -> np.ndarray:
        """``R0 u``."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.p,):
            raise ValueError(f"vector has shape {u.shape}, coarse space acts on length {self.p}")
        off = self.offsets
        return np.concatenate([V.T @ u[off[i]:off[i + 1]] for i, V in enumerate(self.V)])

    def dense(self) -> np.ndarray:
        """Explicit ``R0^T`` (p x m)."""
        R = np.zeros((self.p, self.m))
        co, off = self.coarse_offsets, self.offsets
        for i, V in enumerate(self.V):
            R[off[i]:off[i + 1], co[i]:co[i + 1]] = V
        return R


@dataclass(frozen=True)
class CoarseOperator:
    matrix: np.ndarray
    lam: float


def _offsets(sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


def orthonormalize(cols: Sequence[np.ndarray], tol: float = DEPENDENCE_TOL) -> np.ndarray:
    """Modified Gram-Schmidt; columns whose remainder falls below ``tol`` relative
    to their original norm are dropped."""
    basis: list[np.ndarray] = []
    for c in cols:
        w = np.array(c, dtype=float)
        n0 = np.linalg.norm(w)
        if n0 == 0.0:
            continue
        for q in basis:
            w -= (q @ w) * q
        n = np.linalg.norm(w)
        if n <= tol * n0:
            continue
        basis.append(w / n)
    if not basis:
        raise ValueError("all candidate coarse columns vanish")
    return np.stack(basis, axis=1)


def _ones_column(p_i: int) -> np.ndarray:
    return np.full((p_i, 1), 1.0 / np.sqrt(p_i))


def _block_sizes(blocks: Sequence[KfacBlock]) -> list[int]:
    return [b.size for b in blocks]


def build_nicolaides(sizes: Sequence[int]) -> CoarseSpace:
    return CoarseSpace(NICOLAIDES, tuple(_ones_column(p_i) for p_i in sizes), _offsets(sizes))


def build_full_space(sizes: Sequence[int]) -> CoarseSpace:
    """Debug space ``V_i = I``: the correction then recovers the exact regularized NGD increment."""
    return CoarseSpace(FULL_SPACE, tuple(np.eye(p_i) for p_i in sizes), _offsets(sizes))


def build_spectral(blocks: Sequence[KfacBlock]) -> CoarseSpace:
    V = tuple(b.smallest_eigvec()[:, None] for b in blocks)
    return CoarseSpace(SPECTRAL, V, _offsets(_block_sizes(blocks)))


def build_krylov(blocks: Sequence[KfacBlock], seeds: Sequence[np.ndarray], m_per_layer: int = 2,
                 kind: str = KRYLOV_NICO) -> CoarseSpace:
    """Per layer: ``[v_i, B_i^{-1} v_i, ..., B_i^{-(m-1)} v_i]`` orthonormalized, where
    ``B_i`` is the damped KFAC block. Collinear iterates are dropped."""
    if m_per_layer < 1:
        raise ValueError("m_per_layer must be at least 1")
    V = []
    for b, seed in zip(blocks, seeds):
        v = np.asarray(seed, dtype=float)
        if not np.any(v):
            raise ValueError(f"Krylov seed for layer {b.index} is zero")
        cols = [v]
        for _ in range(m_per_layer - 1):
            cols.append(b.apply_inverse(cols[-1]))
        V.append(orthonormalize(cols))
    return CoarseSpace(kind, tuple(V), _offsets(_block_sizes(blocks)))


def _normalized_or_ones(w: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(w)
    if n == 0.0 or not np.isfinite(n):
        return _ones_column(w.size)
    return (w / n)[:, None]


def build_residuals(blocks: Sequence[KfacBlock], r: np.ndarray) -> CoarseSpace:
    """``V_i`` spans the layer-``i`` segment of ``F_KFAC^{-1} r``; zero segments fall back to ones."""
    w = kfac_apply_inverse(list(blocks), r)
    off = _offsets(_block_sizes(blocks))
    V = tuple(_normalized_or_ones(w[off[i]:off[i + 1]]) for i in range(len(blocks)))
    return CoarseSpace(RESIDUALS, V, off)


def build_taylor(blocks: Sequence[KfacBlock], oracle: FisherOracle, r: np.ndarray, q: int = 2) -> CoarseSpace:
    """Columns ``w_1 = F_KFAC^{-1} r``, ``w_{j+1} = F_KFAC^{-1} F_reg w_j`` split by layer."""
    if q < 1:
        raise ValueError("Taylor order q must be >= 1")
    blocks = list(blocks)
    ws = [kfac_apply_inverse(blocks, r)]
    for _ in range(q - 1):
        ws.append(kfac_apply_inverse(blocks, oracle.fisher_matvec(ws[-1])))
    off = _offsets(_block_sizes(blocks))
    V = []
    for i in range(len(blocks)):
        segs = [w[off[i]:off[i + 1]] for w in ws]
        if not any(np.any(s) for s in segs):
            V.append(_ones_column(off[i + 1] - off[i]))
        else:
            V.append(orthonormalize(segs))
    return CoarseSpace(TAYLOR, tuple(V), off)


def coarse_operator(oracle: FisherOracle, R0: CoarseSpace) -> CoarseOperator:
    """Assemble ``R0 (F + lam I) R0^T`` block by block without forming ``F``.

    Block ``(i, j)`` is ``V_i^T J_i J_j^T V_j / B``; ``lam V_i^T V_i`` is added on
    diagonal blocks only.
    """
    if R0.p != oracle.p or len(R0.V) != oracle.n_layers:
        raise ValueError("coarse space does not match the Fisher oracle's layout")
    co = R0.coarse_offsets
    Fc = np.zeros((R0.m, R0.m))
    for j, Vj in enumerate(R0.V):
        mu = oracle.jt_layer(j, Vj)                    # step 1: J_j^T w
        for i, Vi in enumerate(R0.V):
            gamma = oracle.j_layer(i, mu)              # step 2: J_i mu
            Fc[co[i]:co[i + 1], co[j]:co[j + 1]] = Vi.T @ gamma / oracle.B   # step 3
        Fc[co[j]:co[j + 1], co[j]:co[j + 1]] += oracle.lam * (Vj.T @ Vj)
    return CoarseOperator(0.5 * (Fc + Fc.T), oracle.lam)


def beta_star(op: CoarseOperator, R0: CoarseSpace, r: np.ndarray) -> np.ndarray:
    """Coefficients minimizing the ``F_reg``-norm error of the corrected increment."""
    return solve_spd(op.matrix, R0.restrict(r))


def beta_tko(op: CoarseOperator, R0: CoarseSpace, grad: np.ndarray) -> np.ndarray:
    """Additive-corrector coefficients: the gradient takes the place of the residual."""
    return solve_spd(op.matrix, R0.restrict(grad))


def apply_correction(delta_kfac: np.ndarray, R0: CoarseSpace, beta: np.ndarray) -> np.ndarray:
    return np.asarray(delta_kfac, dtype=float) + R0.prolong(beta)


def gap(op: CoarseOperator, R0: CoarseSpace, beta: np.ndarray, r: np.ndarray) -> float:
    """Change of the squared ``F_reg``-distance to the exact increment caused by ``R0^T beta``.

    Evaluated as ``<F_c beta, beta> - 2 <R0^T beta, r>``, which needs neither the
    exact increment nor ``beta`` to be optimal.
    """
    beta = np.asarray(beta, dtype=float)
    return float(beta @ (op.matrix @ beta) - 2.0 * (R0.prolong(beta) @ np.asarray(r, dtype=float)))


def build_space(kind: str, blocks: Sequence[KfacBlock], oracle: Optional[FisherOracle] = None,
                r: Optional[np.ndarray] = None, taylor_order: int = 2, krylov_width: int = 2) -> CoarseSpace:
    """Dispatch on a coarse-space kind name."""
    sizes = _block_sizes(blocks)
    if kind == NICOLAIDES:
        return build_nicolaides(sizes)
    if kind == SPECTRAL:
        return build_spectral(blocks)
    if kind == FULL_SPACE:
        return build_full_space(sizes)
    if kind == KRYLOV_NICO:
        return build_krylov(blocks, [np.ones(s) for s in sizes], krylov_width, kind=KRYLOV_NICO)
    if r is None:
        raise ValueError(f"coarse space {kind!r} needs the KFAC residual")
    off = _offsets(sizes)
    if kind == KRYLOV_RESIDU:
        seeds = [r[off[i]:off[i + 1]] for i in range(len(sizes))]
        seeds = [s if np.any(s) else np.ones(s.size) for s in seeds]
        return build_krylov(blocks, seeds, krylov_width, kind=KRYLOV_RESIDU)
    if kind == RESIDUALS:
        return build_residuals(blocks, r)
    if kind == TAYLOR:
        if oracle is None:
            raise ValueError("the Taylor coarse space needs the Fisher oracle")
        return build_taylor(blocks, oracle, r, taylor_order)
    raise ValueError(f"unknown coarse space kind {kind!r}")
