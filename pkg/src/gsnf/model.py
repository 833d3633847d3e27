"""The full model: graph and latent inference, flow stack, heads, and one training forward pass."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowStack
from .generation import (ItgConfig, delta_lower_bound, generate_trajectory, itg_auxiliary,
                         itg_loss, rtg_loss, rtg_trajectory)
from .inference import (GraphInference, LatentInference, encode_observation, graph_posterior,
                        latent_posterior, sample_adjacency, sample_z0)
from .layers import Module
from .numerics import Tensor
from .objective import Heads, LossWeights, cross_entropy, elbo, total_loss


@dataclass
class ForwardResult:
    loss: Tensor
    components: dict            # name -> float batch mean
    logits: np.ndarray          # (B, K)
    bound: dict = field(default_factory=dict)


class GSNFModel(Module):
    """All trainable pieces plus the switches used by the ablations.

    ``use_graph=False`` replaces every inferred adjacency by the identity,
    so each variable only interacts with itself.
    """

    def __init__(self, n_vars, n_classes, rng, hidden=128, layers=2, n_segments=4,
                 spectral_target=0.45, use_graph=True):
        self.n_vars = n_vars
        self.n_classes = n_classes
        self.n_segments = n_segments
        self.use_graph = use_graph
        d_z = n_vars
        self.graph = GraphInference(n_vars, rng, hidden=hidden)
        self.latent = LatentInference(n_vars, d_z, rng, hidden=hidden)
        self.stack = FlowStack.build(layers, n_vars, rng, hidden=hidden, spectral_target=spectral_target)
        self.heads = Heads(d_z, n_vars, n_classes, rng, hidden=hidden)

    # ------------------------------------------------------------------ pieces

    def segment_means(self, batch):
        return np.einsum("bcl,bld->bcd", batch.seg_weights, batch.values)

    def _identity(self, lead):
        eye = np.eye(self.n_vars)
        return Tensor(np.broadcast_to(eye, lead + eye.shape).copy())

    def infer_graph(self, batch):
        return graph_posterior(self.segment_means(batch), self.graph)

    def point_adjacency(self, batch, gp):
        """Segment attention matrix assigned to each observation, (B, L, D, D)."""
        B, L = batch.segments.shape
        if not self.use_graph:
            return self._identity((B, L))
        return gp.adjacency[np.arange(B)[:, None], batch.segments]

    def infer_latent(self, batch, gp):
        z_obs = encode_observation(self.latent, batch.values, batch.mask)
        return latent_posterior(z_obs, batch.times, self.point_adjacency(batch, gp), self.stack,
                                self.latent)

    def adjacency(self, gp, noise=None):
        if not self.use_graph:
            return self._identity(gp.weights.shape[:-1])
        return sample_adjacency(gp, noise)

    # ------------------------------------------------------------------ training

    def forward(self, batch, rng=None, itg=None, weights=None, use_itg=True, use_rtg=True):
        """Full objective on one batch.

        With ``rng`` the adjacency and the initial state are drawn once each
        by reparameterisation; without it the mean path is used.
        """
        itg = ItgConfig() if itg is None else itg
        weights = LossWeights() if weights is None else weights
        B, L, D = batch.values.shape

        gp = self.infer_graph(batch)
        a_noise = None if rng is None else rng.standard_normal((B, D, D))
        A = self.adjacency(gp, a_noise)

        lp = self.infer_latent(batch, gp)
        z_noise = None if rng is None else rng.standard_normal((B, D))
        z0 = sample_z0(lp, batch.valid, z_noise)

        traj = generate_trajectory(z0, A, batch.times, self.stack)
        decoded = self.heads.decode(traj.states)
        l_vae = elbo(decoded, batch.values, batch.mask, lp.kl, batch.valid).mean()
        logits = self.heads.logits(z0)
        l_ce = cross_entropy(logits, batch.labels).mean()

        bound = {}
        zero = Tensor(0.0)
        l_itg = zero
        if use_itg:
            aux = itg_auxiliary(traj, batch.lengths, itg, self.stack)
            if itg.margin_mode == "derived":
                bound = delta_lower_bound(A.data, self.stack.layers[0].effective_gcn_weight().data,
                                          z0.data, aux.reinit_state.data, aux.count,
                                          fixed_delta=itg.fixed_delta)
                delta_sq = float(np.mean(bound["delta_lb"])) ** 2
            else:
                delta_sq = itg.fixed_delta ** 2
            l_itg = itg_loss(aux.original, aux.auxiliary, delta_sq, aux.count, aux.valid).mean()
        l_rtg = zero
        if use_rtg:
            rev = rtg_trajectory(traj, batch.lengths, self.stack)
            per = rtg_loss(self.heads.decode(rev), batch.values, batch.mask * batch.valid[..., None])
            l_rtg = per.mean()

        loss = total_loss(l_vae, l_ce, l_itg, l_rtg, weights)
        comps = {"elbo": l_vae.item(), "cross_entropy": l_ce.item(), "itg": l_itg.item(),
                 "rtg": l_rtg.item(), "total": loss.item()}
        return ForwardResult(loss, comps, logits.data, bound)

    # ------------------------------------------------------------------ evaluation

    def initial_state(self, batch):
        """Posterior mean of the initial latent state, (B, D)."""
        gp = self.infer_graph(batch)
        return sample_z0(self.infer_latent(batch, gp), batch.valid).data

    def predict_logits(self, batch):
        return self.heads.logits(Tensor(self.initial_state(batch))).data

    def mean_adjacency(self, batch):
        return self.adjacency(self.infer_graph(batch)).data

    def renormalize(self, n_iter=1, tol=1e-9):
        for layer in self.stack.layers:
            layer.renormalize(n_iter=n_iter, tol=tol)


def resolve_margin_mode(margin_mode, layers):
    """The derived margin is only meaningful for a single stage; fall back otherwise."""
    if margin_mode == "derived" and layers != 1:
        warnings.warn("derived margin needs a single flow layer; using the fixed margin instead",
                      RuntimeWarning, stacklevel=2)
        return "fixed"
    return margin_mode
