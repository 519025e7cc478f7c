"""Central finite differences and the PSD square-root factor."""
from __future__ import annotations

import numpy as np

EPS = np.finfo(float).eps


def fd_step(x) -> np.ndarray:
    """Per-coordinate step eps^(1/3) * max(1, |x_i|) for central differences."""
    return EPS ** (1.0 / 3.0) * np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))


def fd_gradient(f, x, step=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = fd_step(x) if step is None else np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h.flat[i]
        g.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h.flat[i])
    return g


def fd_jacobian_of_gradient(grad, x, step=None) -> np.ndarray:
    """Hessian from central differences of an analytic gradient, symmetrised."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = fd_step(x) if step is None else np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        H[:, i] = (grad(x + e) - grad(x - e)) / (2.0 * h[i])
    return 0.5 * (H + H.T)


def psd_factor(M, rel_tol: float = 1e-12) -> np.ndarray:
    """Return ``R`` (r x n) with ``R.T @ R == M`` for a symmetric PSD ``M``.

    Uses the eigendecomposition rather than Cholesky because ``M`` may be
    singular. Eigenvalues below ``rel_tol * lambda_max`` are treated as zero and
    their rows dropped, so ``r`` is the numerical rank. Rows are ordered by
    decreasing eigenvalue and signed so the first non-negligible entry is positive.
    """
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    n = M.shape[0]
    lam, U = np.linalg.eigh(M)
    lam, U = lam[::-1], U[:, ::-1]
    lam_max = lam[0] if n else 0.0
    if lam_max <= 0:
        return np.zeros((0, n))
    keep = lam > rel_tol * lam_max
    R = np.sqrt(lam[keep])[:, None] * U[:, keep].T
    return sign_rows(R)


def sign_rows(R) -> np.ndarray:
    R = np.array(R, dtype=float)
    for row in R:
        nz = np.flatnonzero(np.abs(row) > 1e-12 * max(np.abs(row).max(), 1e-300))
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return R
