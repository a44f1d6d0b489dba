import numpy as np
import pytest
from hypothesis import given, strategies as st

from kfac2l import twolevel as tl
from kfac2l.checks import (COARSE_KINDS, check_full_space, check_multiplicative, explicit_kfac_inverse,
                           random_case)
from kfac2l.fisher import FisherOracle
from kfac2l.kfac import kfac_apply_inverse, make_block
from kfac2l.network import DenseSpec, Network, backward, forward

seeds = st.integers(0, 2 ** 32 - 1)


def kfac_state(case):
    delta = kfac_apply_inverse(case.blocks, case.grad)
    return delta, case.oracle.residual(case.grad, delta)


def test_nicolaides_examples():
    R0 = tl.build_nicolaides([4, 6])
    assert R0.m == 2
    assert np.allclose(R0.V[0][:, 0], 0.5)
    assert np.allclose(R0.V[1][:, 0], 1 / np.sqrt(6))
    one = tl.build_nicolaides([5])
    assert np.allclose(one.dense(), np.full((5, 1), 1 / np.sqrt(5)))


@given(st.lists(st.integers(1, 12), min_size=1, max_size=5))
def test_nicolaides_orthonormal(sizes):
    Rt = tl.build_nicolaides(sizes).dense()
    assert np.allclose(Rt.T @ Rt, np.eye(len(sizes)))


def test_prolong_restrict_are_adjoint(rng):
    case = random_case(rng)
    delta, r = kfac_state(case)
    for kind in COARSE_KINDS:
        R0 = tl.build_space(kind, case.blocks, case.oracle, r)
        Rt = R0.dense()
        beta = rng.standard_normal(R0.m)
        assert np.allclose(R0.prolong(beta), Rt @ beta)
        assert np.allclose(R0.restrict(r), Rt.T @ r)
        assert np.allclose(Rt.T @ Rt, np.eye(R0.m), atol=1e-10)


def test_spectral_examples():
    ident = [make_block(np.eye(2), np.eye(2), 0.0, index=0, offset=0)]
    assert np.array_equal(tl.build_spectral(ident).V[0][:, 0], np.kron([1.0, 0], [1.0, 0]))
    diag = [make_block(np.diag([3.0, 1.0]), np.diag([2.0, 4.0]), 0.0)]
    assert np.allclose(np.abs(tl.build_spectral(diag).V[0][:, 0]), np.kron([0.0, 1.0], [1.0, 0.0]))


@given(seeds)
def test_spectral_rayleigh_quotient(seed):
    case = random_case(np.random.default_rng(seed))
    R0 = tl.build_spectral(case.blocks)
    for b, V in zip(case.blocks, R0.V):
        M = b.dense()
        assert np.isclose(V[:, 0] @ M @ V[:, 0], np.linalg.eigvalsh(M)[0], rtol=1e-8, atol=1e-12)


def test_krylov_identity_block_collapses():
    block = make_block(np.eye(2), np.eye(3), 0.0)
    R0 = tl.build_krylov([block], [np.ones(6)])
    assert R0.widths == [1]


def test_krylov_diagonal_block_second_column():
    block = make_block(np.diag([1.0, 2.0]), np.diag([3.0, 5.0]), 0.0)
    R0 = tl.build_krylov([block], [np.ones(4)])
    assert R0.widths == [2]
    inv = np.linalg.inv(np.kron(np.diag([1.0, 2.0]), np.diag([3.0, 5.0]))) @ np.ones(4)
    # the second iterate lies in the span and the seed is reproduced exactly
    V = R0.V[0]
    for w in (np.ones(4), inv):
        assert np.linalg.norm(w - V @ (V.T @ w)) <= 1e-12 * np.linalg.norm(w)
    assert np.allclose(inv, 1.0 / np.kron([1.0, 2.0], [3.0, 5.0]))


def test_krylov_rejects_zero_seed():
    block = make_block(np.eye(2), np.eye(2), 0.1)
    with pytest.raises(ValueError):
        tl.build_krylov([block], [np.zeros(4)])


def test_residuals_fallback_and_containment(rng):
    case = random_case(rng)
    R0 = tl.build_residuals(case.blocks, np.zeros(case.net.p))
    assert np.allclose(R0.dense(), tl.build_nicolaides(case.net.sizes).dense())
    _, r = kfac_state(case)
    R0 = tl.build_residuals(case.blocks, r)
    w = kfac_apply_inverse(case.blocks, r)
    Rt = R0.dense()
    beta, *_ = np.linalg.lstsq(Rt, w, rcond=None)
    assert np.linalg.norm(Rt @ beta - w) <= 1e-10 * np.linalg.norm(w)
    # the weights are the per-layer norms of the preimage
    norms = [np.linalg.norm(s) for s in case.net.split(w)]
    assert np.allclose(R0.prolong(np.array(norms)), w)


def test_taylor_degenerates_to_residuals(rng):
    case = random_case(rng)
    _, r = kfac_state(case)
    a = tl.build_taylor(case.blocks, case.oracle, r, q=1)
    b = tl.build_residuals(case.blocks, r)
    for Va, Vb in zip(a.V, b.V):
        assert np.allclose(np.abs(Va.T @ Vb), 1.0)
    z = tl.build_taylor(case.blocks, case.oracle, np.zeros(case.net.p), q=2)
    assert np.allclose(z.dense(), tl.build_nicolaides(case.net.sizes).dense())


def test_taylor_second_column_explicit(rng):
    case = random_case(rng, max_p=120)
    _, r = kfac_state(case)
    K = explicit_kfac_inverse(case.blocks)
    w1 = K @ r
    w2 = K @ case.fisher_reg @ w1
    R0 = tl.build_taylor(case.blocks, case.oracle, r, q=2)
    Rt = R0.dense()
    for w in (w1, w2):
        for i in range(len(case.blocks)):
            seg = case.net.segment(w, i)
            V = R0.V[i]
            assert np.linalg.norm(seg - V @ (V.T @ seg)) <= 1e-8 * max(np.linalg.norm(seg), 1e-300)


def test_coarse_operator_full_space_is_explicit(rng):
    case = random_case(rng, max_p=120)
    R0 = tl.build_full_space(case.net.sizes)
    F = case.fisher_reg
    assert np.allclose(tl.coarse_operator(case.oracle, R0).matrix, F, rtol=1e-10, atol=1e-12)


def test_coarse_operator_zero_jacobian():
    net = Network([DenseSpec(3, 2, "tanh"), DenseSpec(2, 2)]).init_params(np.random.default_rng(0))
    z, cache = forward(net, np.ones((3, 3)))
    backward(net, cache, z.copy(), outputs=z)
    op = tl.coarse_operator(FisherOracle(net, cache, 0.3), tl.build_nicolaides(net.sizes))
    assert np.allclose(op.matrix, 0.3 * np.eye(2))


@given(seeds)
def test_coarse_operator_matches_explicit(seed):
    case = random_case(np.random.default_rng(seed))
    _, r = kfac_state(case)
    F = case.fisher_reg
    for kind in COARSE_KINDS:
        R0 = tl.build_space(kind, case.blocks, case.oracle, r)
        Rt = R0.dense()
        expected = Rt.T @ F @ Rt
        got = tl.coarse_operator(case.oracle, R0).matrix
        assert np.linalg.norm(got - expected) <= 1e-9 * np.linalg.norm(expected)
        assert np.array_equal(got, got.T)


@given(seeds)
def test_beta_star_optimal_and_gap_nonpositive(seed):
    case = random_case(np.random.default_rng(seed))
    delta, r = kfac_state(case)
    F = case.fisher_reg
    exact = np.linalg.solve(F, case.grad)
    for kind in COARSE_KINDS:
        R0 = tl.build_space(kind, case.blocks, case.oracle, r)
        op = tl.coarse_operator(case.oracle, R0)
        beta = tl.beta_star(op, R0, r)
        Rt = R0.dense()
        # stationarity of the coarse normal equations
        assert np.linalg.norm(Rt.T @ (r - F @ Rt @ beta)) <= 1e-8 * max(1.0, np.linalg.norm(Rt.T @ r))
        # explicit quadratic minimizer
        beta_ref = np.linalg.solve(Rt.T @ F @ Rt, Rt.T @ F @ (exact - delta))
        assert np.allclose(beta, beta_ref, rtol=1e-6, atol=1e-8)
        g = tl.gap(op, R0, beta, r)
        assert g <= 1e-12
        e2 = tl.apply_correction(delta, R0, beta) - exact
        e0 = delta - exact
        assert abs(g - (e2 @ F @ e2 - e0 @ F @ e0)) <= 1e-8 * max(1.0, e0 @ F @ e0)


def test_beta_examples(rng):
    case = random_case(rng)
    R0 = tl.build_nicolaides(case.net.sizes)
    op = tl.coarse_operator(case.oracle, R0)
    zeros = np.zeros(case.net.p)
    assert np.array_equal(tl.beta_star(op, R0, zeros), np.zeros(R0.m))
    assert np.array_equal(tl.beta_tko(op, R0, zeros), np.zeros(R0.m))
    assert tl.gap(op, R0, np.zeros(R0.m), case.grad) == 0.0
    # zero KFAC increment: the residual is the gradient, so both corrections agree
    r = case.oracle.residual(case.grad, zeros)
    assert np.allclose(tl.beta_tko(op, R0, case.grad), tl.beta_star(op, R0, r))


def test_beta_tko_explicit(rng):
    case = random_case(rng, max_p=120)
    R0 = tl.build_nicolaides(case.net.sizes)
    Rt = R0.dense()
    expected = np.linalg.solve(Rt.T @ case.fisher_reg @ Rt, Rt.T @ case.grad)
    assert np.allclose(tl.beta_tko(tl.coarse_operator(case.oracle, R0), R0, case.grad), expected, rtol=1e-8)


def test_apply_correction_examples(rng):
    R0 = tl.build_nicolaides([4, 9])
    d = rng.standard_normal(13)
    assert np.array_equal(tl.apply_correction(d, R0, np.zeros(2)), d)
    out = tl.apply_correction(np.zeros(13), R0, np.array([2.0, 3.0]))
    assert np.allclose(out, 1.0)
    b1, b2 = rng.standard_normal(2), rng.standard_normal(2)
    lhs = tl.apply_correction(d, R0, b1 + b2) - d
    assert np.allclose(lhs, (tl.apply_correction(d, R0, b1) - d) + (tl.apply_correction(d, R0, b2) - d))


@given(seeds)
def test_multiplicative_identity(seed):
    r = np.random.default_rng(seed)
    assert check_multiplicative(random_case(r, max_p=100), r) <= 1e-8


@given(seeds)
def test_full_space_recovers_exact_increment(seed):
    r = np.random.default_rng(seed)
    assert check_full_space(random_case(r, max_p=100), r) <= 1e-7


def test_orthonormalize_drops_dependent_columns():
    V = tl.orthonormalize([np.array([1.0, 0, 0]), np.array([2.0, 0, 0]), np.array([1.0, 1.0, 0])])
    assert V.shape == (3, 2)
    with pytest.raises(ValueError):
        tl.orthonormalize([np.zeros(3)])


def test_unknown_kind_and_missing_residual(rng):
    case = random_case(rng)
    with pytest.raises(ValueError):
        tl.build_space("nope", case.blocks, case.oracle, case.grad)
    with pytest.raises(ValueError):
        tl.build_space(tl.RESIDUALS, case.blocks, case.oracle, None)
