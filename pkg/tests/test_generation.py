import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gsnf.exceptions import ConfigError
from gsnf.flow import FlowStack, GATE_EPS
from gsnf.generation import (ItgConfig, delta_lower_bound, generate_trajectory, itg_auxiliary,
                             itg_loss, rtg_loss, rtg_trajectory)
from gsnf.numerics import Tape, Tensor, backward
from gsnf.verify import margin_bound, random_layer, random_stochastic


def _setup(rng, D=3, L=8, B=2, layers=2):
    stack = FlowStack([random_layer(rng, D, hidden=16) for _ in range(layers)])
    times = np.sort(rng.uniform(0, 1, (B, L)), axis=1)
    z0 = rng.standard_normal((B, D))
    A = random_stochastic(rng, D, (B,))
    return stack, times, z0, A


def test_origin_time_returns_initial_state(rng):
    stack, _, z0, A = _setup(rng, B=1)
    traj = generate_trajectory(z0[0], A[0], np.array([0.0]), stack)
    np.testing.assert_array_equal(traj.states.data[0], z0[0])


def test_trajectory_deterministic(rng):
    stack, times, z0, A = _setup(rng)
    a = generate_trajectory(z0, A, times, stack).states.data
    b = generate_trajectory(z0, A, times, stack).states.data
    np.testing.assert_array_equal(a, b)


def test_trajectory_order_independent(rng):
    stack, times, z0, A = _setup(rng, B=1, L=12)
    t = times[0]
    perm = rng.permutation(len(t))
    ref = generate_trajectory(z0[0], A[0], t, stack).states.data
    shuffled = generate_trajectory(z0[0], A[0], t[perm], stack).states.data
    inv = np.argsort(perm)
    np.testing.assert_array_equal(shuffled[inv], ref)


def test_itg_config_validation():
    assert ItgConfig().index_for(32) == 16
    assert ItgConfig().index_for(7) == 4
    with pytest.raises(ConfigError):
        ItgConfig(reinit_index=9).index_for(8)
    with pytest.raises(ConfigError):
        ItgConfig(reinit_index=0).index_for(8)
    with pytest.raises(ConfigError):
        ItgConfig(fixed_delta=0.0)
    with pytest.raises(ConfigError):
        ItgConfig(margin_mode="adaptive")


def test_auxiliary_matches_original_at_reinit(rng):
    stack, times, z0, A = _setup(rng)
    traj = generate_trajectory(z0, A, times, stack)
    aux = itg_auxiliary(traj, np.array([8, 8]), ItgConfig(), stack)
    np.testing.assert_array_equal(aux.auxiliary.data[:, 0], aux.original.data[:, 0])
    np.testing.assert_array_equal(aux.reinit_state.data, traj.states.data[:, 3])
    assert list(aux.count) == [5, 5]


def test_auxiliary_respects_lengths(rng):
    stack, times, z0, A = _setup(rng, L=10)
    traj = generate_trajectory(z0, A, times, stack)
    aux = itg_auxiliary(traj, np.array([10, 6]), ItgConfig(), stack)
    assert list(aux.count) == [6, 4]
    np.testing.assert_array_equal(aux.valid[1], [1, 1, 1, 1, 0, 0])


def test_dead_graph_branch_freezes_everything(rng):
    stack, times, z0, A = _setup(rng)
    for layer in stack.layers:
        layer.gcn_weight.data[:] = 0.0
        layer.renormalize()
    traj = generate_trajectory(z0, A, times, stack)
    np.testing.assert_array_equal(traj.states.data, np.broadcast_to(z0[:, None], traj.states.shape))
    aux = itg_auxiliary(traj, np.array([8, 8]), ItgConfig(), stack)
    np.testing.assert_array_equal(aux.auxiliary.data, np.broadcast_to(aux.reinit_state.data[:, None],
                                                                      aux.auxiliary.shape))
    rev = rtg_trajectory(traj, np.array([8, 8]), stack)
    np.testing.assert_array_equal(rev.data, traj.states.data)


def _scalar_stage(layer, z, t0, t, A):
    """Plain-Python evaluation of one stage for a single state vector."""
    D = len(z)
    dt = t - t0
    s = sum(a * math.sin(f * dt) for a, f in zip(layer.gate.amps.data, layer.gate.freqs.data))
    phi = (1 - GATE_EPS) * math.tanh(s) ** 2
    h = list(z) + [t, t0]
    for lin in layer.mlp.layers:
        W = lin.effective_weight().data
        b = lin.bias.data
        h = [math.tanh(sum(h[i] * W[i, j] for i in range(len(h))) + b[j]) for j in range(W.shape[1])]
    Wg = layer.effective_gcn_weight().data
    nodes = [[z[i], t, t0] for i in range(D)]
    agg = [[sum(A[i][j] * nodes[j][c] for j in range(D)) for c in range(3)] for i in range(D)]
    g = [sum(agg[i][c] * Wg[c, 0] for c in range(3)) for i in range(D)]
    return [z[i] + phi * h[i] * g[i] for i in range(D)]


def _scalar_stack(stack, z, t0, t, A):
    for layer in stack.layers:
        z = _scalar_stage(layer, z, t0, t, A)
    return z


def test_divergence_matches_scalar_reimplementation(rng):
    stack, times, z0, A = _setup(rng, D=2, L=6, B=1)
    traj = generate_trajectory(z0, A, times, stack)
    aux = itg_auxiliary(traj, np.array([6]), ItgConfig(), stack)
    got = np.linalg.norm(aux.original.data[0] - aux.auxiliary.data[0], axis=-1)
    t, Al = times[0], A[0].tolist()
    orig = [_scalar_stack(stack, z0[0].tolist(), 0.0, ti, Al) for ti in t]
    k0 = 2
    z_star = orig[k0]
    expect = []
    for i in range(k0, 6):
        zs = _scalar_stack(stack, z_star, t[k0], t[i], Al)
        expect.append(math.sqrt(sum((a - b) ** 2 for a, b in zip(orig[i], zs))))
    np.testing.assert_allclose(got, expect, rtol=1e-9, atol=1e-13)


def test_itg_loss_examples():
    z = np.ones((1, 4, 2))
    assert itg_loss(z, z, np.array([0.25]), np.array([4])).data[0] == pytest.approx(0.25 / 4)
    far = z.copy()
    far[0, 0, 0] += math.sqrt(0.25 + 1)
    assert itg_loss(z, far, np.array([0.25]), np.array([4])).data[0] == 0.0
    z16 = np.zeros((1, 16, 3))
    assert itg_loss(z16, z16, np.array([1e-6 ** 2]), np.array([16])).data[0] == pytest.approx(1e-12 / 16,
                                                                                         rel=1e-12)


def test_itg_loss_gradient_vanishes_beyond_margin(rng):
    a = Tensor(rng.standard_normal((1, 3, 2)), requires_grad=True)
    b = Tensor(a.data + 5.0, requires_grad=True)
    with Tape() as tape:
        loss = itg_loss(a, b, np.array([1.0]), np.array([3])).sum()
    backward(loss, tape)
    assert np.all(a.grad == 0) and np.all(b.grad == 0)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
def test_itg_loss_monotone_in_divergence(d1, d2, delta):
    lo, hi = sorted([d1, d2])
    z = np.zeros((1, 1, 1))
    f = lambda d: itg_loss(z, np.full((1, 1, 1), math.sqrt(d)), np.array([delta**2]), np.array([1])).data[0]
    assert f(hi) <= f(lo) + 1e-12
    assert f(lo) >= 0
    if hi > delta**2:
        assert f(hi) == 0.0


def test_bound_examples():
    out = delta_lower_bound(2 * np.eye(3), np.array([[1.0], [0.0], [0.0]]) , np.zeros(3),
                            np.array([0.5, 0.0, 0.0]), 4)
    assert out["eta"] == pytest.approx(1.0)
    assert out["bound"] == pytest.approx(2.0)
    assert out["delta_lb"] == pytest.approx(2.0 / 2.0)
    assert not out["fallback"]
    # scalar cross-check of the same arithmetic
    smin_A, smin_W, d_in, n = 2.0, 1.0, 0.5, 4
    assert out["bound"] == pytest.approx(max(0.0, n * (smin_A * smin_W * d_in - d_in)))


def test_bound_zero_cases(rng):
    A = random_stochastic(rng, 4)
    W = rng.standard_normal((3, 1)) * 0.3
    out = delta_lower_bound(A, W, rng.standard_normal(4), rng.standard_normal(4), 5, fixed_delta=0.7)
    assert out["bound"] == 0.0 and out["fallback"] and out["delta_lb"] == 0.7
    z = rng.standard_normal(4)
    same = delta_lower_bound(3 * np.eye(4), np.eye(3)[:, :1] * 2, z, z, 5)
    assert same["delta_in"] == 0.0 and same["bound"] == 0.0


def test_bound_orthogonal_invariance(rng):
    D = 4
    A = 2.5 * np.eye(D) + 0.1 * rng.random((D, D))
    W = np.array([[1.5], [0.2], [0.1]])
    z0, zs = rng.standard_normal((3, D)), rng.standard_normal((3, D))
    Q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    a = delta_lower_bound(np.broadcast_to(A, (3, D, D)), W, z0, zs, 6)
    b = delta_lower_bound(np.broadcast_to(A, (3, D, D)), W, z0 @ Q.T, zs @ Q.T, 6)
    assert np.all(a["bound"] > 0)
    np.testing.assert_allclose(a["delta_lb"], b["delta_lb"], rtol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_bound_is_valid_lower_bound(seed):
    res = margin_bound(scale=0.05, seed=seed)
    assert res.passed, res.details


def test_rtg_examples(rng):
    stack, times, z0, A = _setup(rng)
    traj = generate_trajectory(z0, A, times, stack)
    rev = rtg_trajectory(traj, np.array([8, 8]), stack).data
    np.testing.assert_array_equal(rev[:, -1], traj.states.data[:, -1])
    one = generate_trajectory(z0[:1], A[:1], times[:1, :1], stack)
    np.testing.assert_array_equal(rtg_trajectory(one, np.array([1]), stack).data, one.states.data)


def test_rtg_loss_examples():
    x = np.arange(6.0).reshape(1, 3, 2)
    m = np.ones_like(x)
    assert rtg_loss(x, x, m).data[0] == 0.0
    assert rtg_loss(x + 1.0, x, np.zeros_like(x)).data[0] == 0.0
    single = np.zeros_like(x)
    single[0, 1, 0] = 1
    assert rtg_loss(x + 2.0, x, single).data[0] == 4.0


@given(st.integers(0, 1000))
def test_losses_nonnegative(seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((2, 2, 5, 3))
    m = (r.random((2, 5, 3)) < 0.5).astype(float)
    assert np.all(rtg_loss(a, b, m).data >= 0)
    assert np.all(itg_loss(a, b, r.random(2), np.array([5, 5])).data >= 0)
