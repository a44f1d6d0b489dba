"""Regularized empirical Fisher operators built from a populated BatchCache.

With ``J`` the p x B matrix whose column ``b`` is the gradient of sample ``b``
(targets drawn from the model), ``F = J J^T / B`` and ``F_reg = F + lam I``.
Products with ``J`` and ``J^T`` are evaluated layer by layer from the cached
``abar`` and ``g`` without ever forming ``J``.
"""
from __future__ import annotations

import numpy as np

from .network import BatchCache, Network, layer_per_sample_grad

MAX_EXPLICIT_P = 5000


class FisherTooLargeError(ValueError):
    pass


class FisherOracle:
    """Immutable view of one mini-batch's Fisher estimate.

    ``u`` vectors live in parameter space (length ``p``); ``v`` vectors in
    sample space (length ``B``). The ``*_layer`` variants act on a single
    layer's block of ``J`` and accept a matrix of stacked columns.
    """

    def __init__(self, net: Network, cache: BatchCache, lam: float):
        if cache.g is None:
            raise ValueError("cache has no pre-activation derivatives; run backward first")
        if lam < 0:
            raise ValueError("damping must be non-negative")
        self.cache = cache
        self.lam = float(lam)
        self.kinds = [layer.kind for layer in net.layers]
        self.shapes = list(net.shapes)
        self.offsets = net.offsets
        self.p = net.p
        self.B = cache.batch_size
        self.n_layers = len(net.layers)

    def segment(self, u, i):
        return u[self.offsets[i]:self.offsets[i + 1]]

    # --- single-layer blocks of J -------------------------------------------------
    def jt_layer(self, i: int, U: np.ndarray) -> np.ndarray:
        """``J_i^T U`` for ``U`` of shape (p_i,) or (p_i, k)."""
        rows, cols = self.shapes[i]
        U = np.asarray(U, dtype=float)
        single = U.ndim == 1
        if U.shape[0] != rows * cols:
            raise ValueError(f"layer {i} block has {rows * cols} entries, got {U.shape[0]}")
        U2 = U[:, None] if single else U
        # M[k] = MAT(U[:, k]), shape (k, rows, cols)
        M = U2.T.reshape(U2.shape[1], cols, rows).transpose(0, 2, 1)
        abar, g = self.cache.abar[i], self.cache.g[i]
        # v[b, k] = sum_t g_bt^T M_k abar_bt (a dense layer has a single location)
        a2 = abar.reshape(-1, abar.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        Ma = a2 @ M.transpose(0, 2, 1)                      # (k, B*T, rows)
        v = np.einsum("knr,nr->nk", Ma, g2).reshape(self.B, -1, M.shape[0]).sum(axis=1)
        return v[:, 0] if single else v

    def j_layer(self, i: int, V: np.ndarray) -> np.ndarray:
        """``J_i V`` for ``V`` of shape (B,) or (B, k); columns are vec(MAT) blocks."""
        V = np.asarray(V, dtype=float)
        single = V.ndim == 1
        if V.shape[0] != self.B:
            raise ValueError(f"expected {self.B} sample weights, got {V.shape[0]}")
        V2 = V[:, None] if single else V
        abar, g = self.cache.abar[i], self.cache.g[i]
        # a conv layer duplicates each sample weight over its T locations
        a2 = abar.reshape(-1, abar.shape[-1])
        g3 = g.reshape(self.B, -1, g.shape[-1])
        out = []
        for k in range(V2.shape[1]):
            weighted = (g3 * V2[:, k, None, None]).reshape(-1, g.shape[-1])
            Mk = weighted.T @ a2                       # [(1 v^T) o G] A^T
            out.append(Mk.reshape(-1, order="F"))
        res = np.stack(out, axis=1)
        return res[:, 0] if single else res

    # --- full operators -----------------------------------------------------------
    def jt_apply(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.p,):
            raise ValueError(f"expected a parameter vector of length {self.p}, got shape {u.shape}")
        v = np.zeros(self.B)
        for i in range(self.n_layers):
            v += self.jt_layer(i, self.segment(u, i))
        return v

    def j_apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.B,):
            raise ValueError(f"expected a sample vector of length {self.B}, got shape {v.shape}")
        return np.concatenate([self.j_layer(i, v) for i in range(self.n_layers)])

    def fisher_matvec(self, u: np.ndarray) -> np.ndarray:
        """``(F + lam I) u``."""
        u = np.asarray(u, dtype=float)
        return self.j_apply(self.jt_apply(u)) / self.B + self.lam * u

    def residual(self, grad: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """``grad - (F + lam I) delta``."""
        grad = np.asarray(grad, dtype=float)
        if grad.shape != (self.p,):
            raise ValueError(f"gradient has shape {grad.shape}, expected ({self.p},)")
        return grad - self.fisher_matvec(delta)

    # --- explicit forms, used as oracles and for exact NGD at desk scale ----------
    def jacobian(self) -> np.ndarray:
        """Materialized ``J`` (p x B), one outer product per sample."""
        self._guard()
        blocks = [layer_per_sample_grad(kind, a, g)
                  for kind, a, g in zip(self.kinds, self.cache.abar, self.cache.g)]
        return np.concatenate(blocks, axis=1).T

    def explicit_fim(self) -> np.ndarray:
        """Unregularized ``F = (1/B) sum_b D theta_b D theta_b^T``."""
        J = self.jacobian()
        F = (J @ J.T) / self.B
        return 0.5 * (F + F.T)

    def _guard(self):
        if self.p > MAX_EXPLICIT_P:
            raise FisherTooLargeError(f"p = {self.p} exceeds the explicit-FIM limit {MAX_EXPLICIT_P}")
