"""Minimal parameter containers: Module, Linear, MLP."""

import numpy as np

from . import numerics as nx
from .linalg import SpectralState
from .numerics import Tensor

_ACTIVATIONS = {
    "tanh": nx.tanh,
    "softplus": nx.softplus,
    None: None,
}


class Module:
    """Walks attributes to collect parameters and spectral states by dotted name."""

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Tensor, Module, SpectralState)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        out = {}
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
        return out

    def named_spectral_states(self, prefix=""):
        out = {}
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, SpectralState):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_spectral_states(name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())


class Linear(Module):
    """``y = x @ W + b`` with fan-in scaled uniform init and an optional spectral cap."""

    def __init__(self, n_in, n_out, rng, bias=True, spectral_target=None):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True) if bias else None
        self.spectral = None
        if spectral_target is not None:
            self.spectral = SpectralState((n_in, n_out), spectral_target, rng)
            self.spectral.update(self.weight.data, tol=1e-10)

    def effective_weight(self):
        if self.spectral is None:
            return self.weight
        return self.spectral.apply(self.weight)

    def __call__(self, x):
        if x.ndim == 1:
            return self(x.reshape((1, x.shape[0]))).reshape((-1,))
        y = nx.matmul(x, self.effective_weight())
        return y if self.bias is None else y + self.bias


class MLP(Module):
    def __init__(self, sizes, rng, activation="tanh", out_activation=None, spectral_target=None):
        self.layers = [Linear(a, b, rng, spectral_target=spectral_target)
                       for a, b in zip(sizes[:-1], sizes[1:])]
        self.activation = activation
        self.out_activation = out_activation

    def __call__(self, x):
        act = _ACTIVATIONS[self.activation]
        for layer in self.layers[:-1]:
            x = act(layer(x))
        x = self.layers[-1](x)
        out_act = _ACTIVATIONS[self.out_activation]
        return x if out_act is None else out_act(x)


SIGMA_FLOOR = 1e-6


class GaussianHead(Module):
    """Shared trunk with two projections: mean and softplus scale."""

    def __init__(self, n_in, n_out, rng, hidden=128):
        self.trunk = MLP([n_in, hidden, hidden], rng, out_activation="tanh")
        self.mu = Linear(hidden, n_out, rng)
        self.sigma = Linear(hidden, n_out, rng)

    def __call__(self, x):
        h = self.trunk(x)
        return self.mu(h), nx.softplus(self.sigma(h)) + SIGMA_FLOOR
