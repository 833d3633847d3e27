import numpy as np
import pytest
from hypothesis import given, strategies as st

from gsnf.exceptions import ConfigError
from gsnf.linalg import (SpectralState, jacobi_eigh, power_iteration, sigma_max, sigma_min,
                         singular_values, spectral_normalize)
from gsnf.numerics import Tape, Tensor, backward


def jacobi_sigma_max(M):
    w, _ = jacobi_eigh(M.T @ M)
    return float(np.sqrt(max(w[-1], 0.0)))


def test_sigma_max_examples():
    assert sigma_max(np.diag([3.0, 1.0])) == pytest.approx(3.0, abs=1e-12)
    assert sigma_max(np.eye(4)) == pytest.approx(1.0, abs=1e-12)


def test_sigma_max_matches_jacobi_oracle(rng):
    for _ in range(10):
        M = rng.standard_normal((6, 4))
        assert sigma_max(M, 100) == pytest.approx(jacobi_sigma_max(M), abs=1e-6)


def test_sigma_max_zero_matrix_is_flagged():
    res = power_iteration(np.zeros((3, 2)), 5)
    assert res.sigma == 0.0 and res.zero_matrix


def test_power_iteration_monotone_in_iterations(rng):
    M = rng.standard_normal((7, 5))
    est = [power_iteration(M, k).sigma for k in range(1, 30)]
    assert all(b >= a - 1e-13 for a, b in zip(est, est[1:]))


def test_jacobi_eigh_matches_numpy(rng):
    for n in (1, 2, 5, 8):
        A = rng.standard_normal((n, n))
        S = A + A.T
        w, V = jacobi_eigh(S)
        np.testing.assert_allclose(w, np.linalg.eigvalsh(S), atol=1e-10)
        np.testing.assert_allclose(V @ np.diag(w) @ V.T, S, atol=1e-10)


def test_sigma_min_examples():
    assert sigma_min(np.diag([2.0, 3.0])) == pytest.approx(2.0, abs=1e-14)
    M = np.random.default_rng(0).standard_normal((5, 3))
    M[:, 2] = M[:, 0]
    assert sigma_min(M) <= 1e-10


def test_sigma_min_rejects_wide_matrix():
    with pytest.raises(ValueError):
        sigma_min(np.ones((2, 3)))


def _char_poly_sigma_min(M):
    """Smallest root of det(M^T M - l I) for n <= 3 via numpy.roots on the polynomial."""
    G = M.T @ M
    coeffs = np.poly(G)
    roots = np.roots(coeffs).real
    return float(np.sqrt(max(roots.min(), 0.0)))


def _row_stochastic(rng, n):
    X = rng.uniform(0, 1, (n, n))
    return X / X.sum(axis=1, keepdims=True)


def test_sigma_min_row_stochastic_oracles(rng):
    for n in (2, 3):
        M = _row_stochastic(rng, n)
        assert sigma_min(M) == pytest.approx(_char_poly_sigma_min(M), abs=1e-7)
    for n in (5, 8):
        M = _row_stochastic(rng, n)
        w, _ = jacobi_eigh(M.T @ M)
        assert sigma_min(M) == pytest.approx(np.sqrt(max(w[0], 0.0)), abs=1e-7)
        assert sigma_min(M) == pytest.approx(np.linalg.svd(M, compute_uv=False)[-1], abs=1e-12)


def test_singular_values_batched(rng):
    M = rng.standard_normal((4, 6, 3))
    np.testing.assert_allclose(singular_values(M), np.linalg.svd(M, compute_uv=False), atol=1e-12)
    out = sigma_min(M)
    assert out.shape == (4,)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_sigma_min_le_sigma_max_and_permutation_invariant(m, n, seed):
    if m < n:
        m, n = n, m
    r = np.random.default_rng(seed)
    M = r.standard_normal((m, n))
    lo, hi = sigma_min(M), sigma_max(M, 200)
    assert lo <= hi + 1e-9
    P = M[r.permutation(m)][:, r.permutation(n)]
    assert sigma_min(P) == pytest.approx(lo, abs=1e-10)
    assert sigma_max(P, 200) == pytest.approx(hi, rel=1e-6)


def test_spectral_normalize_examples(rng):
    U, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    V, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    W = U[:, :4] @ np.diag([5.0, 2.0, 1.0, 0.5]) @ V.T
    state = SpectralState(W.shape, 0.45, rng)
    state.update(W, tol=1e-12)
    out = state.apply(W).data
    assert sigma_max(out, 100) == pytest.approx(0.45, abs=1e-6)

    small = W / 50.0
    state = SpectralState(small.shape, 0.45, rng)
    out = spectral_normalize(small, state, n_iter=50).data
    np.testing.assert_array_equal(out, small)

    zero = np.zeros((3, 3))
    np.testing.assert_array_equal(spectral_normalize(zero, SpectralState((3, 3), 0.45, rng)).data, zero)


def test_spectral_cap_on_random_matrices():
    r = np.random.default_rng(7)
    for _ in range(200):
        shape = tuple(r.integers(1, 12, 2))
        W = r.standard_normal(shape) * r.uniform(0.01, 10)
        state = SpectralState(shape, 0.45, r)
        state.update(W, tol=1e-10)
        assert sigma_max(state.apply(W).data, 100) <= 0.45 + 1e-3


def test_spectral_state_invariants(rng):
    state = SpectralState((5, 3), 0.45, rng)
    W = rng.standard_normal((5, 3))
    state.update(W, n_iter=3)
    assert np.linalg.norm(state.u) == pytest.approx(1.0)
    assert np.linalg.norm(state.v) == pytest.approx(1.0)
    assert state.sigma_est > 0
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ConfigError):
            SpectralState((2, 2), bad)


def test_spectral_scale_is_constant_for_gradients(rng):
    W = Tensor(rng.standard_normal((4, 3)) * 5, requires_grad=True)
    state = SpectralState((4, 3), 0.45, rng)
    state.update(W.data, tol=1e-12)
    with Tape() as tape:
        loss = state.apply(W).sum()
    backward(loss, tape)
    np.testing.assert_allclose(W.grad, np.full((4, 3), state.scale))
