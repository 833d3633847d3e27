"""Decoder/classifier heads and the composite training objective."""

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, NumericError
from .layers import MLP, Module
from .numerics import Tensor, as_tensor


class Heads(Module):
    """Decoder ``z -> x`` (3 hidden tanh layers) and a one-hidden-layer classifier ``z0 -> logits``."""

    def __init__(self, d_z, n_vars, n_classes, rng, hidden=128, n_hidden=3):
        self.decoder = MLP([d_z] + [hidden] * n_hidden + [n_vars], rng, activation="tanh")
        self.classifier = MLP([d_z, hidden, n_classes], rng, activation="tanh")
        self.n_classes = n_classes

    def decode(self, z):
        return self.decoder(z)

    def logits(self, z0):
        return self.classifier(z0)


@dataclass
class LossWeights:
    alpha: float = 1000.0
    beta: float = 0.1
    gamma: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")


def reconstruction(decoded, values, mask):
    """Unit-variance Gaussian log-likelihood on observed entries, constants dropped. Shape (B,)."""
    mask = np.asarray(mask, dtype=np.float64)
    diff = as_tensor(decoded) - Tensor(values)
    return (diff * diff * Tensor(mask)).sum(axis=(-2, -1)) * -0.5


def mean_point_kl(point_kl, valid):
    """``(1/L) sum_i KL_i`` over each series' valid points. Shape (B,)."""
    valid = np.asarray(valid, dtype=np.float64)
    n = np.maximum(valid.sum(axis=-1), 1.0)
    return (as_tensor(point_kl) * Tensor(valid)).sum(axis=-1) / Tensor(n)


def elbo(decoded, values, mask, point_kl, valid):
    """Per-sample evidence lower bound (reconstruction minus averaged KL). Shape (B,)."""
    return reconstruction(decoded, values, mask) - mean_point_kl(point_kl, valid)


def cross_entropy(logits, y):
    """``-log softmax(logits)[y]`` per row. ``logits`` (B, K) or (K,)."""
    logits = as_tensor(logits)
    y = np.asarray(y)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.reshape((1, logits.shape[0]))
        y = y.reshape(1)
    K = logits.shape[-1]
    if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= K):
        raise ValueError(f"class labels must be integers in [0, {K}), got {y.tolist()}")
    logp = nx.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    out = (logp * Tensor(onehot)).sum(axis=-1) * -1.0
    return out.reshape(()) if squeeze else out


def _check_finite(value, name):
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"loss component {name} is not finite", component=name)


def total_loss(l_vae, l_ce, l_itg, l_rtg, weights=None):
    """``-l_vae + alpha*l_ce + beta*l_itg + gamma*l_rtg`` (scalars or tensors)."""
    w = LossWeights() if weights is None else weights
    parts = {"elbo": l_vae, "cross_entropy": l_ce, "itg": l_itg, "rtg": l_rtg}
    for name, value in parts.items():
        _check_finite(value, name)
    if not any(isinstance(v, Tensor) for v in parts.values()):
        return -l_vae + w.alpha * l_ce + w.beta * l_itg + w.gamma * l_rtg
    l_vae, l_ce, l_itg, l_rtg = (as_tensor(v) for v in parts.values())
    return l_vae * -1.0 + l_ce * w.alpha + l_itg * w.beta + l_rtg * w.gamma
