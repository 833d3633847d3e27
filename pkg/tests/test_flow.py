import numpy as np
import pytest
from hypothesis import given, strategies as st

from gsnf.exceptions import ContractViolation, NonConvergenceError
from gsnf.flow import (FlowStack, GsnfLayer, TimeGate, analytic_pair_bound, gsnf_forward,
                       gsnf_invert, lipschitz_probe, residual, stack_forward, stack_invert, time_gate)
from gsnf.numerics import Tape, Tensor, backward
from gsnf.verify import random_layer, random_stochastic


@pytest.fixture
def layer(rng):
    return GsnfLayer(4, rng, hidden=32)


def test_gate_examples():
    gate = TimeGate()
    assert time_gate(gate, 0.0).item() == 0.0
    dts = np.linspace(-5, 5, 1001)
    phi = time_gate(gate, dts).data
    assert np.all(phi >= 0) and np.all(phi <= 0.999)
    single = TimeGate(n_freqs=1, amplitude=2.0)
    assert time_gate(single, 0.7).item() == time_gate(single, -0.7).item()


def test_gate_stays_below_ceiling_for_huge_amplitudes():
    gate = TimeGate(amplitude=100.0)
    phi = time_gate(gate, np.linspace(-1, 1, 501)).data
    assert phi.max() <= 0.999


def test_forward_identity_is_bit_exact(layer, rng):
    z = rng.standard_normal((50, 4))
    A = random_stochastic(rng, 4, (50,))
    t0 = rng.uniform(0, 1, 50)
    np.testing.assert_array_equal(gsnf_forward(z, t0, t0, A, layer).data, z)


def test_zero_graph_weight_gives_identity(layer, rng):
    layer.gcn_weight.data[:] = 0.0
    layer.renormalize()
    z = rng.standard_normal((10, 4))
    np.testing.assert_array_equal(gsnf_forward(z, 0.0, 0.8, np.eye(4), layer).data, z)


def test_non_stochastic_adjacency_rejected(layer):
    with pytest.raises(ContractViolation):
        gsnf_forward(np.zeros(4), 0.0, 1.0, 2 * np.eye(4), layer)
    with pytest.raises(ContractViolation):
        gsnf_forward(np.zeros(4), 0.0, 1.0, np.full((4, 4), 0.5), layer)


def test_one_layer_stack_equals_forward(layer, rng):
    z = rng.standard_normal((5, 4))
    A = random_stochastic(rng, 4)
    np.testing.assert_array_equal(stack_forward(FlowStack([layer]), z, 0.1, 0.9, A).data,
                                  gsnf_forward(z, 0.1, 0.9, A, layer).data)


def test_stack_identity_any_depth(rng):
    stack = FlowStack.build(3, 4, rng, hidden=16)
    z = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(stack_forward(stack, z, 0.4, 0.4, random_stochastic(rng, 4)).data, z)


def test_invert_round_trip(rng):
    layer = random_layer(rng, 5)
    A = random_stochastic(rng, 5)
    z = rng.standard_normal(5)
    x = gsnf_forward(z, 0.2, 0.9, A, layer).data
    z_rec, hist = gsnf_invert(x, 0.2, 0.9, A, layer, return_history=True)
    assert np.linalg.norm(z_rec - z) <= 1e-6
    assert len(hist) <= 101
    assert np.array_equal(gsnf_invert(x, 0.5, 0.5, A, layer), x)


def test_stack_invert_round_trip(rng):
    stack = FlowStack([random_layer(rng, 4), random_layer(rng, 4)])
    A = random_stochastic(rng, 4)
    z = rng.standard_normal((3, 4))
    x = stack_forward(stack, z, 0.0, 1.0, A).data
    assert np.abs(stack_invert(stack, x, 0.0, 1.0, A, tol=1e-10) - z).max() <= 1e-6


def test_contraction_rate_within_probe(rng):
    layer = random_layer(rng, 6)
    A = random_stochastic(rng, 6)
    probe = lipschitz_probe(layer, 0.0, 0.6, A, n_pairs=1000, rng=rng)
    x = rng.standard_normal(6) * 2
    _, hist = gsnf_invert(x, 0.0, 0.6, A, layer, tol=1e-12, return_history=True)
    h = np.asarray(hist)
    ratios = h[1:] / h[:-1]
    assert np.all(ratios[h[:-1] > 1e-13] <= probe + 0.05)


def test_non_convergence_carries_residual(rng):
    layer = random_layer(rng, 4)
    with pytest.raises(NonConvergenceError) as exc:
        gsnf_invert(rng.standard_normal(4), 0.0, 0.9, random_stochastic(rng, 4), layer,
                    tol=0.0, max_iters=2)
    assert exc.value.residual is not None


def test_probe_examples(rng, layer):
    with pytest.raises(ValueError):
        lipschitz_probe(layer, 0.0, 1.0, np.eye(4), n_pairs=50)
    A = random_stochastic(rng, 4)
    assert lipschitz_probe(layer, 0.0, 1.0, A, n_pairs=1000) < 1.0
    dead = GsnfLayer(4, rng, hidden=16)
    dead.gcn_weight.data[:] = 0.0
    dead.renormalize()
    assert lipschitz_probe(dead, 0.0, 1.0, A) == 0.0


def test_probe_unchanged_by_weight_scale_after_renormalisation(rng):
    layer = random_layer(rng, 4, stretch=3.0)
    A = random_stochastic(rng, 4)
    before = lipschitz_probe(layer, 0.0, 0.7, A, n_pairs=1000, rng=np.random.default_rng(0))
    for lin in layer.mlp.layers:
        lin.weight.data *= 2.0
    layer.renormalize(tol=1e-12)
    after = lipschitz_probe(layer, 0.0, 0.7, A, n_pairs=1000, rng=np.random.default_rng(0))
    assert after == pytest.approx(before, rel=0.05)


def test_analytic_bound_dominates_measured_ratio(rng):
    layer = random_layer(rng, 5)
    A = random_stochastic(rng, 5)
    z1, z2 = rng.standard_normal((200, 5)), rng.standard_normal((200, 5))
    r = residual(np.concatenate([z1, z2]), 0.1, 0.8, A, layer).data
    ratio = np.linalg.norm(r[:200] - r[200:], axis=1) / np.linalg.norm(z1 - z2, axis=1)
    assert np.all(ratio <= analytic_pair_bound(layer, z1, z2, 0.1, 0.8, A) + 1e-12)


@given(st.integers(0, 2**31 - 1))
def test_bi_lipschitz_sandwich(seed):
    r = np.random.default_rng(seed)
    layer = random_layer(r, 3, hidden=16)
    A = random_stochastic(r, 3)
    t0, t = r.uniform(0, 1, 2)
    z1, z2 = r.standard_normal((100, 3)), r.standard_normal((100, 3))
    f = gsnf_forward(np.concatenate([z1, z2]), t0, t, A, layer).data
    out = np.linalg.norm(f[:100] - f[100:], axis=1)
    d = np.linalg.norm(z1 - z2, axis=1)
    L = analytic_pair_bound(layer, z1, z2, t0, t, A)
    assert np.all((1 - L) * d - 1e-9 <= out) and np.all(out <= (1 + L) * d + 1e-9)


def _fd_check(f, param, rng, h=1e-6):
    d = rng.standard_normal(param.shape)
    base = param.data.copy()
    param.data = base + h * d
    fp = f()
    param.data = base - h * d
    fm = f()
    param.data = base
    return (fp - fm) / (2 * h), d


def test_forward_gradients_match_finite_differences(rng):
    layer = random_layer(rng, 3, hidden=8)
    A = random_stochastic(rng, 3)
    z = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = rng.standard_normal((4, 3))

    def value():
        return float((gsnf_forward(z, 0.1, 0.7, A, layer).data * w).sum())

    params = {"z": z, "gcn": layer.gcn_weight, "freqs": layer.gate.freqs, "amps": layer.gate.amps}
    params.update({f"mlp{i}": lin.weight for i, lin in enumerate(layer.mlp.layers)})
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = (gsnf_forward(z, 0.1, 0.7, A, layer) * Tensor(w)).sum()
    backward(loss, tape)
    for name, p in params.items():
        num, d = _fd_check(value, p, rng)
        ana = float((p.grad * d).sum())
        assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-8), name
