"""Variational posteriors over the interaction graph and the initial latent state."""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import segment_assignment
from .flow import stack_forward
from .layers import MLP, GaussianHead, Module
from .numerics import Tensor, as_tensor

KL_FLOOR = 1e-12


class GraphInference(Module):
    """Query/key projections ``(1, D)`` and the shared Gaussian head on flattened adjacencies."""

    def __init__(self, n_vars, rng, hidden=128):
        self.n_vars = n_vars
        self.wq = Tensor(rng.normal(0.0, 1.0, (1, n_vars)), requires_grad=True)
        self.wk = Tensor(rng.normal(0.0, 1.0, (1, n_vars)), requires_grad=True)
        self.head = GaussianHead(n_vars * n_vars, n_vars * n_vars, rng, hidden=hidden)


class LatentInference(Module):
    """Observation encoder ``[x || m] -> z`` and the Gaussian head on backward-propagated states."""

    def __init__(self, n_vars, d_z, rng, hidden=128, n_hidden=3):
        self.encoder = MLP([2 * n_vars] + [hidden] * n_hidden + [d_z], rng, activation="tanh")
        self.head = GaussianHead(d_z, d_z, rng, hidden=hidden)


@dataclass
class GraphPosterior:
    adjacency: Tensor  # (B, C, D, D) segment attention matrices
    mu: Tensor         # (B, C, D, D)
    sigma: Tensor      # (B, C, D, D)
    kl: Tensor         # (B, C)
    weights: Tensor    # (B, C)


@dataclass
class LatentPosterior:
    z0_points: Tensor  # (B, L, D) backward-propagated encodings
    mu: Tensor         # (B, L, D)
    sigma: Tensor      # (B, L, D)
    kl: Tensor         # (B, L)


def segment_means(series, n_segments):
    """Per-segment temporal averages of the zero-imputed values, shape (C, D)."""
    seg = segment_assignment(series.length, n_segments)
    out = np.zeros((n_segments, series.n_vars))
    np.add.at(out, seg, series.values)
    return out / np.bincount(seg, minlength=n_segments)[:, None]


def attention_adjacency(xbar, wq, wk):
    """Row-softmax of ``q_i k_j^T / sqrt(D)`` with ``q_i = xbar_i wq`` and ``k_i = xbar_i wk``.

    ``xbar`` has shape (..., D); the result has shape (..., D, D).
    """
    xbar = as_tensor(xbar)
    D = xbar.shape[-1]
    col = xbar.reshape(xbar.shape + (1,))
    q = nx.matmul(col, wq)
    k = nx.matmul(col, wk)
    logits = nx.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(D))
    return nx.softmax(logits, axis=-1)


def kl_diag_gaussian(mu, sigma, axis=-1):
    """KL(N(mu, diag sigma^2) || N(0, I)) summed over ``axis``."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("kl_diag_gaussian needs sigma > 0")
    var = sigma * sigma
    return ((mu * mu + var - 1.0 - nx.log(var)) * 0.5).sum(axis=axis)


def mixture_weights(kl):
    """``w_s = KL_s / sum_j KL_j`` along the last axis; uniform where the total is ~0."""
    kl = as_tensor(kl)
    total = kl.sum(axis=-1, keepdims=True)
    degenerate = total.data < KL_FLOOR
    if not np.any(degenerate):
        return kl / total
    C = kl.shape[-1]
    safe_total = total + Tensor(np.where(degenerate, 1.0, 0.0))
    ratio = kl / safe_total
    return ratio * Tensor(np.where(degenerate, 0.0, 1.0)) + Tensor(np.where(degenerate, 1.0 / C, 0.0))


def graph_posterior(xbar, graph):
    """Segment adjacencies, their Gaussian components and KL-derived mixture weights.

    ``xbar`` has shape (B, C, D).
    """
    A_seg = attention_adjacency(xbar, graph.wq, graph.wk)
    lead = A_seg.shape[:-2]
    D = graph.n_vars
    mu, sigma = graph.head(A_seg.reshape(lead + (D * D,)))
    kl = kl_diag_gaussian(mu, sigma)
    return GraphPosterior(A_seg, mu.reshape(lead + (D, D)), sigma.reshape(lead + (D, D)), kl,
                          mixture_weights(kl))


def sample_adjacency(gp, noise=None):
    """Row-softmax of ``sum_s w_s (mu_s + sigma_s * noise)``; ``noise=None`` gives the mean path."""
    w = gp.weights.reshape(gp.weights.shape + (1, 1))
    mu_bar = (w * gp.mu).sum(axis=-3)
    logits = mu_bar
    if noise is not None:
        sigma_bar = (w * gp.sigma).sum(axis=-3)
        logits = mu_bar + sigma_bar * Tensor(noise)
    return nx.softmax(logits, axis=-1)


def encode_observation(latent, x, m):
    return latent.encoder(nx.concat([as_tensor(x), as_tensor(m)], axis=-1))


def latent_posterior(z_obs, times, point_adjacency, stack, latent, t0=0.0):
    """Propagate each encoded state back to ``t0`` under its segment graph, then apply the head.

    ``z_obs`` (B, L, D), ``times`` (B, L), ``point_adjacency`` (B, L, D, D).
    """
    z0_points = stack_forward(stack, z_obs, times, t0, point_adjacency, check=False)
    mu, sigma = latent.head(z0_points)
    return LatentPosterior(z0_points, mu, sigma, kl_diag_gaussian(mu, sigma))


def moment_match(lp, valid):
    """Mean and std of the uniform mixture over valid points; shapes (B, D)."""
    w = Tensor(valid / valid.sum(axis=1, keepdims=True))[..., None]
    mean = (w * lp.mu).sum(axis=1)
    second = (w * (lp.sigma * lp.sigma + lp.mu * lp.mu)).sum(axis=1)
    var = second - mean * mean
    var_floor = np.maximum(var.data, 1e-12) - var.data
    return mean, nx.sqrt(var + Tensor(var_floor))


def sample_z0(lp, valid, noise=None):
    """One reparameterised draw from the moment-matched mixture (mean when ``noise`` is None)."""
    mean, std = moment_match(lp, valid)
    if noise is None:
        return mean
    return mean + std * Tensor(noise)
