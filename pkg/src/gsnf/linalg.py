"""Spectral machinery: power iteration, Jacobi singular values, spectral norm caps."""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, NonConvergenceError
from .numerics import as_tensor

__all__ = [
    "PowerIterationResult",
    "power_iteration",
    "sigma_max",
    "sigma_min",
    "singular_values",
    "jacobi_eigh",
    "SpectralState",
    "spectral_normalize",
]


@dataclass
class PowerIterationResult:
    sigma: float
    u: np.ndarray
    v: np.ndarray
    zero_matrix: bool = False


def _default_start(n):
    v = np.random.default_rng(0).standard_normal(n)
    return v / np.linalg.norm(v)


def power_iteration(M, iters, v0=None):
    """Estimate the top singular triplet of ``M`` with ``iters`` rounds.

    The estimate ``||M v_k||`` is non-decreasing in ``iters`` for a fixed
    start vector because ``M^T M`` is positive semidefinite.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = M.shape[1]
    v = _default_start(n) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    v /= np.linalg.norm(v)
    if not np.any(M):
        return PowerIterationResult(0.0, np.zeros(M.shape[0]), v, zero_matrix=True)
    u = M @ v
    for _ in range(iters):
        u = M @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            break
        u /= nu
        v = M.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            break
        v /= nv
    u = M @ v
    sigma = float(np.linalg.norm(u))
    if sigma > 0:
        u = u / sigma
    return PowerIterationResult(sigma, u, v)


def sigma_max(M, iters=100, v0=None):
    """Largest singular value by power iteration (0.0 for the zero matrix)."""
    return power_iteration(M, iters, v0).sigma


def _one_sided_jacobi(M, tol=1e-14, max_sweeps=100):
    """Column-orthogonalise ``M`` (batched over leading axes) by Jacobi rotations.

    Each rotation is the Jacobi rotation that annihilates one off-diagonal
    entry of ``M^T M``; applying it to the columns avoids forming ``M^T M``
    explicitly, which would square the condition number.
    """
    U = np.array(M, dtype=np.float64, copy=True)
    n = U.shape[-1]
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci = U[..., :, i]
                cj = U[..., :, j]
                alpha = np.einsum("...k,...k->...", ci, ci)
                beta = np.einsum("...k,...k->...", cj, cj)
                gamma = np.einsum("...k,...k->...", ci, cj)
                active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not np.any(active):
                    continue
                rotated = True
                safe_gamma = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * safe_gamma)
                t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t = np.where(zeta == 0.0, 1.0, t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(active, c, 1.0)[..., None]
                s = np.where(active, s, 0.0)[..., None]
                new_i = c * ci - s * cj
                new_j = s * ci + c * cj
                U[..., :, i] = new_i
                U[..., :, j] = new_j
        if not rotated:
            return U
    gram = np.swapaxes(U, -1, -2) @ U
    off = gram - np.einsum("...ii->...i", gram)[..., None] * np.eye(n)
    raise NonConvergenceError(
        f"Jacobi did not converge after {max_sweeps} sweeps",
        component="sigma_min", residual=float(np.abs(off).max()))


def singular_values(M, max_sweeps=100):
    """All singular values (descending) via one-sided cyclic Jacobi; batched."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim < 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    if M.shape[-2] < M.shape[-1]:
        M = np.swapaxes(M, -1, -2)
    if M.shape[-1] > 256:
        raise ConfigError("dense Jacobi path supports at most 256 columns")
    U = _one_sided_jacobi(M, max_sweeps=max_sweeps)
    return -np.sort(-np.linalg.norm(U, axis=-2), axis=-1)


def sigma_min(M, max_sweeps=100):
    """Smallest singular value of an m x n matrix with m >= n.

    Computed as the square root of the smallest eigenvalue of ``M^T M``
    through cyclic Jacobi rotations applied column-wise. Accepts a stack of
    matrices and returns an array in that case.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape[-2] < M.shape[-1]:
        raise ValueError(f"sigma_min needs m >= n, got shape {M.shape}")
    sv = singular_values(M, max_sweeps=max_sweeps)
    out = sv[..., -1]
    return float(out) if out.ndim == 0 else out


def jacobi_eigh(S, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a small symmetric matrix by classical cyclic Jacobi.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending.
    """
    A = np.array(S, dtype=np.float64, copy=True)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("jacobi_eigh needs a symmetric square matrix")
    V = np.eye(n)
    scale = max(1.0, np.linalg.norm(A))
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            w = np.diag(A).copy()
            order = np.argsort(w)
            return w[order], V[:, order]
        for p in range(n - 1):
            for q in range(p + 1, n):
                if A[p, q] == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                R = np.eye(n)
                R[p, p] = R[q, q] = c
                R[p, q] = s
                R[q, p] = -s
                A = R.T @ A @ R
                V = V @ R
    raise NonConvergenceError("Jacobi eigen-decomposition did not converge",
                              component="jacobi_eigh", residual=float(off))


class SpectralState:
    """Persistent power-iteration vectors for one weight matrix.

    The effective weight is ``W * target / max(target, sigma_est)``.
    """

    def __init__(self, shape, target=0.45, rng=None):
        if not 0.0 < target < 1.0:
            raise ConfigError(f"spectral target must lie in (0, 1), got {target}")
        rng = np.random.default_rng(0) if rng is None else rng
        u = rng.standard_normal(shape[0])
        v = rng.standard_normal(shape[1])
        self.u = u / np.linalg.norm(u)
        self.v = v / np.linalg.norm(v)
        self.sigma_est = 0.0
        self.target = float(target)

    @property
    def scale(self):
        return self.target / max(self.target, self.sigma_est)

    def update(self, W, n_iter=1, tol=None, max_iter=200):
        """Run power iterations from the stored vectors.

        With ``tol`` set, keep iterating (up to ``max_iter``) until the
        relative change of the estimate drops below ``tol``.
        """
        W = np.asarray(W, dtype=np.float64)
        if not np.any(W):
            self.sigma_est = 0.0
            return self.sigma_est
        limit = n_iter if tol is None else max(n_iter, max_iter)
        prev = self.sigma_est
        for k in range(limit):
            u = W @ self.v
            nu = np.linalg.norm(u)
            if nu == 0.0:
                break
            self.u = u / nu
            v = W.T @ self.u
            nv = np.linalg.norm(v)
            if nv == 0.0:
                break
            self.v = v / nv
            self.sigma_est = float(nv)
            if tol is not None and k + 1 >= n_iter and abs(self.sigma_est - prev) <= tol * self.sigma_est:
                break
            prev = self.sigma_est
        return self.sigma_est

    def apply(self, W):
        """Scaled weight; the scale factor is a constant for differentiation."""
        return as_tensor(W) * self.scale


def spectral_normalize(W, state, n_iter=1):
    """Update ``state`` with ``n_iter`` power iterations and return the capped weight."""
    W = as_tensor(W)
    state.update(W.data, n_iter=n_iter)
    return state.apply(W)

