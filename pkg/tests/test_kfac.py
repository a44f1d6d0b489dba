import numpy as np
import pytest
from hypothesis import given, strategies as st

from kfac2l.checks import explicit_kfac_inverse, random_case
from kfac2l.fisher import FisherOracle
from kfac2l.kfac import (NonSPDFactorError, build_blocks, damping_pi, estimate_factors, kfac_apply_inverse,
                         make_block, smallest_eigvec_block)
from kfac2l.linalg import solve_spd
from kfac2l.network import ConvSpec, DenseSpec, Network, backward, forward

seeds = st.integers(0, 2 ** 32 - 1)


def dense_cache(x, d_out=2, seed=0):
    net = Network([DenseSpec(x.shape[1], d_out)]).init_params(np.random.default_rng(seed))
    z, cache = forward(net, x)
    backward(net, cache, np.random.default_rng(seed + 1).standard_normal(z.shape), outputs=z)
    return net, cache


def test_single_sample_factors_are_rank_one(rng):
    net, cache = dense_cache(rng.standard_normal((1, 3)))
    A, G = estimate_factors(cache, 0)
    a, g = cache.abar[0][0], cache.g[0][0]
    assert np.allclose(A, np.outer(a, a))
    assert np.allclose(G, np.outer(g, g))
    # with B = 1 the undamped Kronecker block is the explicit Fisher
    assert np.allclose(np.kron(A, G), FisherOracle(net, cache, 0.0).explicit_fim(), atol=1e-15)


def test_zero_inputs_leave_bias_only():
    _, cache = dense_cache(np.zeros((4, 3)))
    A, _ = estimate_factors(cache, 0)
    expected = np.zeros((4, 4)); expected[-1, -1] = 1.0
    assert np.array_equal(A, expected)


def test_conv_factors_against_patch_list(rng):
    spec = ConvSpec(1, 2, (2, 2), (3, 3))          # T = 4 locations
    net = Network([spec]).init_params(rng)
    z, cache = forward(net, rng.standard_normal((2, 9)))
    backward(net, cache, rng.standard_normal(z.shape), outputs=z)
    A, G = estimate_factors(cache, 0)
    A_ref = np.zeros_like(A); G_ref = np.zeros_like(G)
    for b in range(2):
        for t in range(4):
            A_ref += np.outer(cache.abar[0][b, t], cache.abar[0][b, t])
            G_ref += np.outer(cache.g[0][b, t], cache.g[0][b, t])
    assert np.allclose(A, A_ref / 2)
    assert np.allclose(G, G_ref / 8)


def test_damping_pi_examples():
    assert damping_pi(2 * np.eye(3), 8 * np.eye(2)) == pytest.approx(0.5)
    assert damping_pi(np.eye(3), np.eye(3)) == pytest.approx(1.0)
    assert damping_pi(np.eye(3), np.zeros((2, 2))) == 1.0


@given(seeds, st.floats(1e-3, 1e3))
def test_damping_pi_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    M, N = r.standard_normal((4, 4)), r.standard_normal((3, 3))
    A, G = M @ M.T, N @ N.T
    assert damping_pi(c * A, c * G) == pytest.approx(damping_pi(A, G), rel=1e-12)


def test_identity_factors_without_damping_are_identity(rng):
    block = make_block(np.eye(3), np.eye(2), 0.0)
    g = rng.standard_normal(6)
    assert np.allclose(kfac_apply_inverse([block], g), g)
    assert np.array_equal(kfac_apply_inverse([block], np.zeros(6)), np.zeros(6))


def test_single_sample_inverse_against_explicit_solve(rng):
    _, cache = dense_cache(rng.standard_normal((1, 3)))
    A, G = estimate_factors(cache, 0)
    lam = 0.1
    block = make_block(A, G, lam)
    a, g = cache.abar[0][0], cache.g[0][0]
    pi = np.sqrt((a @ a / 4) / (g @ g / 2))
    M = np.kron(np.outer(a, a) + pi * np.sqrt(lam) * np.eye(4), np.outer(g, g) + np.sqrt(lam) / pi * np.eye(2))
    x = rng.standard_normal(8)
    assert np.allclose(kfac_apply_inverse([block], x), solve_spd(M, x), rtol=1e-10)


@given(seeds)
def test_kfac_inverse_against_explicit_blocks(seed):
    case = random_case(np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1).standard_normal(case.net.p)
    expected = explicit_kfac_inverse(case.blocks) @ x
    assert np.linalg.norm(kfac_apply_inverse(case.blocks, x) - expected) <= 1e-8 * np.linalg.norm(expected)
    # and back: multiplying by the explicit damped blocks recovers x
    for b in case.blocks:
        sl = slice(b.offset, b.offset + b.size)
        assert np.allclose(b.dense() @ b.apply_inverse(x[sl]), x[sl], rtol=1e-8, atol=1e-10)


@given(seeds)
def test_block_spectrum_is_outer_product(seed):
    case = random_case(np.random.default_rng(seed), max_p=64)
    for b in case.blocks:
        if b.size <= 64:
            assert np.allclose(b.eigenvalues(), np.linalg.eigvalsh(b.dense()), rtol=1e-9, atol=1e-12)


def test_smallest_eigvec_examples():
    v = smallest_eigvec_block(make_block(np.eye(2), np.eye(3), 0.0))
    assert np.array_equal(v, np.kron([1.0, 0.0], [1.0, 0.0, 0.0]))
    v = smallest_eigvec_block(make_block(np.diag([1.0, 10.0]), np.diag([5.0, 2.0]), 0.0))
    assert np.allclose(np.abs(v), np.kron([1.0, 0.0], [0.0, 1.0]))


@given(seeds)
def test_smallest_eigvec_is_eigenvector(seed):
    case = random_case(np.random.default_rng(seed))
    for b in case.blocks:
        v = b.smallest_eigvec()
        M = b.dense()
        sigma = np.linalg.eigvalsh(M)[0]
        assert np.isclose(np.linalg.norm(v), 1.0)
        assert np.linalg.norm(M @ v - sigma * v) <= 1e-8 * max(1.0, np.linalg.norm(M, 2))


def test_non_spd_factor_rejected():
    with pytest.raises(NonSPDFactorError):
        make_block(np.zeros((2, 2)), np.eye(2), 0.0)


def test_build_blocks_offsets(rng):
    case = random_case(rng)
    assert [b.offset for b in case.blocks] == list(case.net.offsets[:-1])
    assert [b.size for b in case.blocks] == case.net.sizes
