"""Graph-conditioned residual flow, its fixed-point inverse, and Lipschitz probes.

One stage maps ``z`` at time ``t0`` to time ``t`` as::

    F(z, t0, t, A) = z + phi(t - t0) * [MLP(z || t || t0) * GCN(A, z || t || t0)]

where ``phi`` vanishes at zero offset and stays below one, the MLP ends in
``tanh`` and every linear layer is spectrally capped. The GCN branch forms
per-variable node features ``[z_i, t, t0]`` and returns ``A @ H @ W``.
Times are assumed to be normalised to ``[0, 1]`` already, so the time
rescaling applied to the node features is the identity.
"""

import numpy as np

from . import numerics as nx
from .exceptions import ContractViolation, NonConvergenceError
from .layers import MLP, Module
from .linalg import SpectralState
from .numerics import Tensor, as_tensor

GATE_EPS = 1e-3


class TimeGate(Module):
    """``phi(dt) = (1 - eps) * tanh(sum_k a_k sin(f_k dt))**2``."""

    def __init__(self, n_freqs=4, amplitude=0.1, fmin=0.5, fmax=8.0, ceiling=1.0 - GATE_EPS):
        self.freqs = Tensor(np.geomspace(fmin, fmax, n_freqs), requires_grad=True)
        self.amps = Tensor(np.full(n_freqs, float(amplitude)), requires_grad=True)
        self.ceiling = float(ceiling)


def time_gate(gate, dt):
    dt = np.asarray(dt, dtype=np.float64)
    arg = (nx.sin(Tensor(dt[..., None]) * gate.freqs) * gate.amps).sum(axis=-1)
    th = nx.tanh(arg)
    return th * th * gate.ceiling


class GsnfLayer(Module):
    """One flow stage: time gate, MLP branch, linear graph branch."""

    def __init__(self, n_vars, rng, latent_per_node=1, hidden=128, n_hidden=3,
                 spectral_target=0.45, gate_amplitude=0.1, n_freqs=4):
        self.n_vars = n_vars
        self.h = latent_per_node
        d_z = n_vars * latent_per_node
        self.d_z = d_z
        self.gate = TimeGate(n_freqs=n_freqs, amplitude=gate_amplitude)
        self.mlp = MLP([d_z + 2] + [hidden] * n_hidden + [d_z], rng,
                       activation="tanh", out_activation="tanh", spectral_target=spectral_target)
        h = latent_per_node
        self.gcn_weight = Tensor(rng.normal(0.0, 0.1, (h + 2, h)), requires_grad=True)
        self.gcn_spectral = SpectralState((h + 2, h), spectral_target, rng)
        self.gcn_spectral.update(self.gcn_weight.data, tol=1e-10)

    def effective_gcn_weight(self):
        return self.gcn_spectral.apply(self.gcn_weight)

    def renormalize(self, n_iter=1, tol=1e-9):
        """Refresh every spectral estimate after a parameter change."""
        for lin in self.mlp.layers:
            lin.spectral.update(lin.weight.data, n_iter=n_iter, tol=tol)
        self.gcn_spectral.update(self.gcn_weight.data, n_iter=n_iter, tol=tol)

    def constrained_matrices(self):
        """Effective (capped) weight matrices as numpy arrays."""
        mats = [lin.effective_weight().data for lin in self.mlp.layers]
        mats.append(self.effective_gcn_weight().data)
        return mats


class FlowStack(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    @classmethod
    def build(cls, n_layers, n_vars, rng, **kwargs):
        return cls([GsnfLayer(n_vars, rng, **kwargs) for _ in range(n_layers)])


def check_row_stochastic(A, atol=1e-9):
    a = A.data if isinstance(A, Tensor) else np.asarray(A)
    if np.any(a < -atol) or not np.allclose(a.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise ContractViolation("adjacency must be row-stochastic (nonnegative rows summing to 1)")


def _times(t, lead):
    return np.broadcast_to(np.asarray(t, dtype=np.float64), lead)


def residual_parts(z, t0, t, A, layer):
    """Return ``(phi, mlp_out, gcn_out)`` for one stage; ``phi`` has shape ``z.shape[:-1]``."""
    z = as_tensor(z)
    A = as_tensor(A)
    lead = np.broadcast_shapes(z.shape[:-1], np.shape(t), np.shape(t0))
    if z.shape[:-1] != lead:
        z = nx.broadcast_to(z, lead + z.shape[-1:])
    t = _times(t, lead)
    t0 = _times(t0, lead)
    phi = time_gate(layer.gate, t - t0)
    tcol = Tensor(t[..., None])
    t0col = Tensor(t0[..., None])
    m = layer.mlp(nx.concat([z, tcol, t0col], axis=-1))
    nodes = z.reshape(lead + (layer.n_vars, layer.h))
    node_t = Tensor(np.broadcast_to(t[..., None, None], lead + (layer.n_vars, 1)))
    node_t0 = Tensor(np.broadcast_to(t0[..., None, None], lead + (layer.n_vars, 1)))
    H = nx.concat([nodes, node_t, node_t0], axis=-1)
    gcn = nx.matmul(nx.matmul(A, H), layer.effective_gcn_weight())
    return phi, m, gcn.reshape(lead + (layer.d_z,))


def residual(z, t0, t, A, layer):
    """``phi(t - t0) * g(z, t0, t, A)``."""
    phi, m, gcn = residual_parts(z, t0, t, A, layer)
    lead = phi.shape
    return phi.reshape(lead + (1,)) * (m * gcn)


def gsnf_forward(z, t0, t, A, layer, check=True):
    """Map ``z`` from ``t0`` to ``t`` through one stage (batched over leading axes)."""
    if check:
        check_row_stochastic(A)
    z = as_tensor(z)
    return z + residual(z, t0, t, A, layer)


def stack_forward(stack, z, t0, t, A, check=True):
    if check:
        check_row_stochastic(A)
    for layer in stack.layers:
        z = gsnf_forward(z, t0, t, A, layer, check=False)
    return z


def gsnf_invert(x, t0, t, A, layer, tol=1e-6, max_iters=200, return_history=False):
    """Solve ``F(z) = x`` by Banach iteration ``z <- x - phi*g(z)`` from ``z = x``.

    Stops once ``max ||F(z) - x|| <= tol``. With ``return_history`` the
    per-iteration residual norms are returned as a second value.
    """
    check_row_stochastic(A)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    z = x.copy()
    history = []
    for _ in range(max_iters + 1):
        r = residual(z, t0, t, A, layer).data
        res = float(np.max(np.linalg.norm(z + r - x, axis=-1))) if z.size else 0.0
        history.append(res)
        if res <= tol:
            return (z, history) if return_history else z
        z = x - r
    raise NonConvergenceError(
        f"fixed-point inversion did not reach tol={tol} in {max_iters} iterations "
        f"(residual {history[-1]:.3e}); the residual map is probably not contractive",
        component="gsnf_invert", residual=history[-1])


def stack_invert(stack, x, t0, t, A, tol=1e-6, max_iters=200):
    for layer in reversed(stack.layers):
        x = gsnf_invert(x, t0, t, A, layer, tol=tol, max_iters=max_iters)
    return x


def sample_probe_pairs(d, n_pairs, rng, scale=1.0):
    """Random pairs: half independent draws, half local perturbations of log-uniform size."""
    z1 = rng.normal(0.0, scale, (n_pairs, d))
    z2 = rng.normal(0.0, scale, (n_pairs, d))
    half = n_pairs // 2
    eps = 10.0 ** rng.uniform(-4, 0, (half, 1))
    z2[:half] = z1[:half] + scale * eps * rng.normal(size=(half, d))
    return z1, z2


def lipschitz_probe(layer, t0, t, A, n_pairs=1000, rng=None, scale=1.0):
    """Empirical lower bound on the Lipschitz constant of ``z -> phi*g(z)``."""
    if n_pairs < 100:
        raise ValueError("lipschitz_probe needs at least 100 pairs")
    rng = np.random.default_rng(0) if rng is None else rng
    z1, z2 = sample_probe_pairs(layer.d_z, n_pairs, rng, scale)
    r = residual(np.concatenate([z1, z2]), t0, t, A, layer).data
    num = np.linalg.norm(r[:n_pairs] - r[n_pairs:], axis=-1)
    den = np.linalg.norm(z1 - z2, axis=-1)
    return float(np.max(num / den))


def analytic_pair_bound(layer, z1, z2, t0, t, A):
    """Rigorous per-pair Lipschitz ceiling for ``phi*g`` between ``z1`` and ``z2``.

    Uses ``g1 - g2 = m1*(c1 - c2) + c2*(m1 - m2)`` with
    ``||c1 - c2|| <= ||A||_2 ||W_z||_2 ||z1 - z2||`` and the MLP's Lipschitz
    constant bounded by the product of exact layer spectral norms.
    """
    A = np.asarray(A.data if isinstance(A, Tensor) else A)
    phi, m1, _ = residual_parts(z1, t0, t, A, layer)
    _, _, c2 = residual_parts(z2, t0, t, A, layer)
    w = layer.effective_gcn_weight().data
    w_z = w[: layer.h]
    a_norm = np.linalg.norm(A, ord=2, axis=(-2, -1)) if A.ndim > 2 else np.linalg.norm(A, 2)
    mlp_lip = np.prod([np.linalg.norm(lin.effective_weight().data, 2) for lin in layer.mlp.layers])
    bound = (np.abs(m1.data).max(axis=-1) * a_norm * np.linalg.norm(w_z, 2)
             + np.abs(c2.data).max(axis=-1) * mlp_lip)
    return phi.data * bound
