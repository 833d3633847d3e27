"""Forward trajectories and the two auxiliary trajectory losses (re-initialisation, reverse time)."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError
from .flow import stack_forward
from .linalg import sigma_min
from .numerics import Tensor, as_tensor


@dataclass
class Trajectory:
    times: np.ndarray        # (B, L)
    states: Tensor           # (B, L, D)
    origin_state: Tensor     # (B, D)
    adjacency: Tensor        # (B, D, D)
    origin_time: float = 0.0


@dataclass
class ItgConfig:
    """Re-initialisation index (1-based, default ceil(L/2)) and margin choice."""

    reinit_index: int = None
    margin_mode: str = "fixed"
    fixed_delta: float = 1e-6

    def __post_init__(self):
        if self.margin_mode not in ("fixed", "derived"):
            raise ConfigError(f"margin_mode must be 'fixed' or 'derived', got {self.margin_mode!r}")
        if self.fixed_delta <= 0:
            raise ConfigError("fixed_delta must be > 0")

    def index_for(self, length):
        k = math.ceil(length / 2) if self.reinit_index is None else int(self.reinit_index)
        if not 1 <= k <= length:
            raise ConfigError(f"re-initialisation index {k} outside [1, {length}]")
        return k


@dataclass
class AuxWindow:
    """Original and re-initialised states over ``t_i >= t0*`` (padded to a common width)."""

    original: Tensor   # (B, W, D)
    auxiliary: Tensor  # (B, W, D)
    valid: np.ndarray  # (B, W)
    count: np.ndarray  # (B,) number of terms L - k0* + 1
    reinit_state: Tensor  # (B, D)
    reinit_time: np.ndarray  # (B,)
    extras: dict = field(default_factory=dict)


def generate_trajectory(z0, A, times, stack, origin_time=0.0):
    """Evaluate the flow from ``(z0, origin_time)`` at every time independently."""
    z0 = as_tensor(z0)
    A = as_tensor(A)
    times = np.asarray(times, dtype=np.float64)
    if times.ndim == 1:
        states = stack_forward(stack, z0.reshape((1, z0.shape[-1])), origin_time, times, A)
    else:
        B = times.shape[0]
        states = stack_forward(stack, z0.reshape((B, 1, z0.shape[-1])), origin_time, times,
                               A.reshape((B, 1) + A.shape[-2:]))
    return Trajectory(times, states, z0, A, origin_time)


def itg_auxiliary(traj, lengths, cfg, stack):
    """Re-initialise at ``t0* = t_{k0*}`` from the original state there and regenerate.

    Only the window ``t_i >= t0*`` is evaluated. ``traj.states`` is (B, L, D)
    and ``lengths`` (B,) gives each series' true length inside the padding.
    """
    B, L, D = traj.states.shape
    lengths = np.asarray(lengths)
    k0 = np.array([cfg.index_for(int(n)) for n in lengths]) - 1
    count = lengths - k0
    offs = np.arange(int(count.max()))
    idx = np.minimum(k0[:, None] + offs[None, :], lengths[:, None] - 1)
    valid = (offs[None, :] < count[:, None]).astype(np.float64)
    rows = np.arange(B)[:, None]
    original = traj.states[rows, idx]
    reinit_state = traj.states[np.arange(B), k0]
    reinit_time = traj.times[np.arange(B), k0]
    win_times = traj.times[rows, idx]
    aux = stack_forward(stack, reinit_state.reshape((B, 1, D)), reinit_time[:, None], win_times,
                        traj.adjacency.reshape((B, 1, D, D)), check=False)
    return AuxWindow(original, aux, valid, count, reinit_state, reinit_time,
                     {"window_times": win_times, "index": idx})


def itg_loss(original, auxiliary, delta_sq, count, valid=None):
    """``max(delta^2 - sum_i ||z(t_i) - z*(t_i)||^2, 0) / (L - k0* + 1)`` per sample.

    ``original``/``auxiliary`` (B, W, D); ``delta_sq`` and ``count`` (B,).
    """
    diff = as_tensor(original) - as_tensor(auxiliary)
    sq = (diff * diff).sum(axis=-1)
    if valid is not None:
        sq = sq * Tensor(valid)
    divergence = sq.sum(axis=-1)
    hinge = nx.maximum0(Tensor(np.asarray(delta_sq, dtype=np.float64)) - divergence)
    return hinge / Tensor(np.asarray(count, dtype=np.float64))


def delta_lower_bound(A_hat, W, z0, z0_star, count, fixed_delta=1e-6):
    """Divergence lower bound and the hinge margin derived from it.

    All inputs are numpy arrays; ``A_hat`` (B, D, D) or (D, D), ``W`` (r, c),
    ``z0``/``z0_star`` (B, D) or (D,), ``count`` = L - k0* + 1. Returns a dict
    with ``delta_in``, ``smin_A``, ``smin_W``, ``eta``, ``bound`` (the sum-of-
    norms bound B), ``fallback`` (B == 0), ``delta_lb`` and ``delta_sq`` (the
    squared margin fed to the hinge, B^2 / count, or ``fixed_delta^2`` when
    B == 0).
    """
    A_hat = np.asarray(A_hat, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.shape[0] < W.shape[1]:
        W = W.T
    delta_in = np.linalg.norm(np.asarray(z0_star) - np.asarray(z0), axis=-1)
    smin_A = np.asarray(sigma_min(A_hat))
    smin_W = sigma_min(W)
    eta = smin_A * smin_W * delta_in
    count = np.asarray(count, dtype=np.float64)
    bound = np.maximum(0.0, count * (eta - delta_in))
    fallback = bound <= 0.0
    delta_lb = np.where(fallback, fixed_delta, bound / np.sqrt(np.maximum(count, 1.0)))
    return {
        "delta_in": delta_in,
        "smin_A": smin_A,
        "smin_W": np.full_like(delta_in, smin_W, dtype=np.float64),
        "eta": eta,
        "bound": bound,
        "fallback": fallback,
        "delta_lb": delta_lb,
        "delta_sq": delta_lb ** 2,
    }


def rtg_trajectory(traj, lengths, stack):
    """Evaluate the flow from the final state ``z(t_L)`` back to every ``t_i``."""
    B, L, D = traj.states.shape
    last = np.asarray(lengths) - 1
    z_last = traj.states[np.arange(B), last]
    t_last = traj.times[np.arange(B), last]
    return stack_forward(stack, z_last.reshape((B, 1, D)), t_last[:, None], traj.times,
                         traj.adjacency.reshape((B, 1, D, D)), check=False)


def rtg_loss(decoded, values, mask):
    """Mask-weighted squared error normalised by the observed-entry count, per sample."""
    mask = np.asarray(mask, dtype=np.float64)
    diff = as_tensor(decoded) - Tensor(values)
    sq = (diff * diff * Tensor(mask)).sum(axis=(-2, -1))
    n_obs = mask.sum(axis=(-2, -1))
    return sq / Tensor(np.maximum(n_obs, 1.0))
