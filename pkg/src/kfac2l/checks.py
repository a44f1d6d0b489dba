"""Oracle-equivalence checks on small random networks.

Each check compares a matrix-free or factored computation against an
explicitly materialized counterpart (dense Fisher, dense Kronecker blocks,
dense prolongation) or against finite differences. The same functions back
the ``selftest`` CLI verb and the acceptance tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import twolevel as tl
from .fisher import FisherOracle
from .kfac import build_blocks, kfac_apply_inverse
from .network import (CROSS_ENTROPY, SQUARED_ERROR, ConvSpec, DenseSpec, Network, backward, forward,
                      loss_value, sample_targets)

COARSE_KINDS = (tl.NICOLAIDES, tl.SPECTRAL, tl.KRYLOV_NICO, tl.KRYLOV_RESIDU, tl.RESIDUALS, tl.TAYLOR)


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: worst {self.worst:.3e} <= {self.tol:.0e} over {self.cases} cases"


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (scale if scale > 0 else 1.0))


def random_layers(rng: np.random.Generator, max_p: int, activations=("tanh", "sigmoid", "relu", "identity"),
                  conv: Optional[bool] = None) -> list:
    """A conv stack followed by dense layers (or dense only), with at most ``max_p`` parameters."""
    use_conv = rng.random() < 0.75 if conv is None else conv
    for _ in range(1000):
        act = lambda: str(rng.choice(activations))
        layers = []
        if use_conv:
            c_in = int(rng.integers(1, 3))
            hw = int(rng.integers(4, 7))
            k = int(rng.integers(2, 4))
            pad = int(rng.integers(0, 2))
            stride = int(rng.integers(1, 3))
            conv1 = ConvSpec(c_in, int(rng.integers(1, 3)), (k, k), (hw, hw), stride, pad, act())
            layers.append(conv1)
            d = conv1.out_size
        else:
            d = int(rng.integers(2, 7))
        for _ in range(int(rng.integers(1, 3))):
            width = int(rng.integers(2, 6))
            layers.append(DenseSpec(d, width, act()))
            d = width
        if sum(l.weight_shape[0] * l.weight_shape[1] for l in layers) <= max_p:
            return layers
    raise RuntimeError("could not draw a network under the parameter budget")


@dataclass
class Case:
    net: Network
    oracle: FisherOracle
    blocks: list
    grad: np.ndarray

    @property
    def fisher_reg(self) -> np.ndarray:
        return self.oracle.explicit_fim() + self.oracle.lam * np.eye(self.net.p)


def random_case(rng: np.random.Generator, max_p: int = 200, batch: Optional[int] = None,
                lam: Optional[float] = None, **layer_kw) -> Case:
    """Network, populated Fisher oracle, KFAC blocks and a gradient on a random batch."""
    loss = SQUARED_ERROR if rng.random() < 0.5 else CROSS_ENTROPY
    net = Network(random_layers(rng, max_p, **layer_kw), loss).init_params(rng)
    B = batch or int(rng.integers(3, 9))
    x = rng.standard_normal((B, net.in_size))
    z, cache = forward(net, x)
    if loss == SQUARED_ERROR:
        y = rng.standard_normal(z.shape)
    else:
        y = rng.integers(0, net.out_size, size=B)
    _, grad = backward(net, cache, y, outputs=z)
    backward(net, cache, sample_targets(cache, z, rng), outputs=z)
    lam = float(10.0 ** rng.uniform(-2, 0)) if lam is None else lam
    oracle = FisherOracle(net, cache, lam)
    return Case(net, oracle, build_blocks(net, cache, lam), grad)


def _block_diag(mats: list[np.ndarray]) -> np.ndarray:
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    k = 0
    for m in mats:
        out[k:k + m.shape[0], k:k + m.shape[0]] = m
        k += m.shape[0]
    return out


def explicit_kfac_inverse(blocks) -> np.ndarray:
    """Dense inverse of the damped block-diagonal KFAC matrix, built from the raw factors."""
    inverses = []
    for b in blocks:
        dA, dG = b.A.shape[0], b.G.shape[0]
        trA, trG = np.trace(b.A) / dA, np.trace(b.G) / dG
        pi = np.sqrt(trA / trG) if trA > 0 and trG > 0 else 1.0
        root = np.sqrt(b.lam)
        Ad = b.A + pi * root * np.eye(dA)
        Gd = b.G + root / pi * np.eye(dG)
        inverses.append(np.linalg.inv(np.kron(Ad, Gd)))
    return _block_diag(inverses)


def _space(case: Case, kind: str) -> tl.CoarseSpace:
    delta = kfac_apply_inverse(case.blocks, case.grad)
    r = case.oracle.residual(case.grad, delta)
    return tl.build_space(kind, case.blocks, case.oracle, r)


# --- individual checks --------------------------------------------------------------
def check_fisher_matvec(case: Case, rng) -> float:
    u = rng.standard_normal(case.net.p)
    return _rel(case.oracle.fisher_matvec(u), case.fisher_reg @ u)


def check_coarse_operator(case: Case, rng) -> float:
    F = case.fisher_reg
    worst = 0.0
    for kind in COARSE_KINDS:
        R0 = _space(case, kind)
        Rt = R0.dense()
        worst = max(worst, _rel(tl.coarse_operator(case.oracle, R0).matrix, Rt.T @ F @ Rt))
    return worst


def check_kfac_inverse(case: Case, rng) -> float:
    x = rng.standard_normal(case.net.p)
    return _rel(kfac_apply_inverse(case.blocks, x), explicit_kfac_inverse(case.blocks) @ x)


def check_multiplicative(case: Case, rng) -> float:
    """Frobenius distance between both sides of the factorized two-level error identity."""
    F = case.fisher_reg
    I = np.eye(case.net.p)
    Kinv = explicit_kfac_inverse(case.blocks)
    worst = 0.0
    for kind in COARSE_KINDS:
        R0 = _space(case, kind)
        Rt = R0.dense()
        Fc = tl.coarse_operator(case.oracle, R0).matrix
        coarse = Rt @ np.linalg.solve(Fc, Rt.T)
        two_level = Kinv + coarse @ (I - F @ Kinv)
        lhs = I - two_level @ F
        rhs = (I - coarse @ F) @ (I - Kinv @ F)
        worst = max(worst, float(np.linalg.norm(lhs - rhs)))
    return worst


def check_full_space(case: Case, rng) -> float:
    delta = kfac_apply_inverse(case.blocks, case.grad)
    r = case.oracle.residual(case.grad, delta)
    R0 = tl.build_full_space(case.net.sizes)
    op = tl.coarse_operator(case.oracle, R0)
    corrected = tl.apply_correction(delta, R0, tl.beta_star(op, R0, r))
    return _rel(corrected, np.linalg.solve(case.fisher_reg, case.grad))


def check_gap(case: Case, rng) -> float:
    """Largest gap over the coarse spaces; nonpositive in exact arithmetic."""
    delta = kfac_apply_inverse(case.blocks, case.grad)
    r = case.oracle.residual(case.grad, delta)
    worst = -np.inf
    for kind in COARSE_KINDS:
        R0 = tl.build_space(kind, case.blocks, case.oracle, r)
        op = tl.coarse_operator(case.oracle, R0)
        worst = max(worst, tl.gap(op, R0, tl.beta_star(op, R0, r), r))
    return float(worst)


def finite_difference_error(rng: np.random.Generator, max_p: int = 50, h: float = 1e-5) -> float:
    """Relative error of back-propagated gradients against central differences."""
    loss = SQUARED_ERROR if rng.random() < 0.5 else CROSS_ENTROPY
    net = Network(random_layers(rng, max_p, activations=("tanh", "sigmoid")), loss).init_params(rng)
    B = int(rng.integers(2, 6))
    x = rng.standard_normal((B, net.in_size))
    y = rng.standard_normal((B, net.out_size)) if loss == SQUARED_ERROR else rng.integers(0, net.out_size, B)
    z, cache = forward(net, x)
    _, grad = backward(net, cache, y, outputs=z)
    fd = np.empty(net.p)
    for k in range(net.p):
        e = np.zeros(net.p)
        e[k] = h
        fd[k] = (loss_value(net.copy(net.theta + e), x, y) - loss_value(net.copy(net.theta - e), x, y)) / (2 * h)
    return _rel(grad, fd)


def _over_cases(name: str, fn: Callable, tol: float, n: int, seed: int, max_p: int,
                worst_of=max) -> CheckResult:
    rng = np.random.default_rng(seed)
    values = [fn(random_case(rng, max_p=max_p), rng) for _ in range(n)]
    return CheckResult(name, float(worst_of(values)), tol, n)


def fisher_matvec_check(n: int = 20, seed: int = 0) -> CheckResult:
    return _over_cases("fisher_matvec vs explicit (F + lam I) u", check_fisher_matvec, 1e-9, n, seed, 200)


def coarse_operator_check(n: int = 20, seed: int = 1) -> CheckResult:
    return _over_cases("coarse_operator vs R0 (F + lam I) R0^T", check_coarse_operator, 1e-9, n, seed, 200)


def kfac_inverse_check(n: int = 20, seed: int = 2) -> CheckResult:
    return _over_cases("kfac_apply_inverse vs explicit damped Kronecker solve", check_kfac_inverse, 1e-8, n,
                       seed, 200)


def multiplicative_check(n: int = 20, seed: int = 3) -> CheckResult:
    return _over_cases("two-level error factorizes into coarse and KFAC factors", check_multiplicative, 1e-8, n,
                       seed, 100)


def full_space_check(n: int = 20, seed: int = 4) -> CheckResult:
    return _over_cases("full-space correction recovers the regularized NGD increment", check_full_space, 1e-7,
                       n, seed, 100)


def gap_check(n: int = 20, seed: int = 5) -> CheckResult:
    return _over_cases("gap of the optimal correction is nonpositive", check_gap, 1e-12, n, seed, 200)


def gradient_check(n: int = 20, seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    return CheckResult("backward vs central finite differences",
                       max(finite_difference_error(rng) for _ in range(n)), 1e-6, n)


ALL_CHECKS = (fisher_matvec_check, coarse_operator_check, kfac_inverse_check, multiplicative_check,
              full_space_check, gap_check, gradient_check)


def run_all(n: int = 20, seed: int = 0) -> list[CheckResult]:
    return [check(n=n, seed=seed + k) for k, check in enumerate(ALL_CHECKS)]
