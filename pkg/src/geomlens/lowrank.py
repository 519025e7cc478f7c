"""Closed-form weight/feature optima, truncated SVD and the alternating solver.

All solves act on the whitened target ``B~ = R_L B`` (``r x |X|``). Weight
factors ``Xi_W`` are ``r x k`` and feature factors ``Xi_f`` are ``k x |X|``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NoGap, NonConvergence, RankTooLarge, SingularGram
from .geometry import GeometryBundle

GRAM_COND_MAX = 1e12
GAP_FRACTION = 1e-3
SVD_MATCH_TOL = 1e-6


@dataclass(frozen=True)
class LayerAnalysis:
    xi_w_star: np.ndarray
    xi_f_star: np.ndarray
    d_star: np.ndarray
    mu_f_star: np.ndarray
    singular_values: np.ndarray
    rank_k: int
    ey_bound: float
    achieved_frobenius: float  # ||B~ - Xi_W Xi_f||_F^2, not halved
    w_star: np.ndarray  # k x n, recovered modulo the null space of M_L
    bias_star: np.ndarray
    method: str = "svd"
    iterations: int = 0
    trace: tuple = field(default=())

    @property
    def product(self) -> np.ndarray:
        return self.xi_w_star @ self.xi_f_star

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rank_k": self.rank_k,
            "singular_values": self.singular_values,
            "ey_bound": self.ey_bound,
            "achieved_frobenius": self.achieved_frobenius,
            "xi_w_star": self.xi_w_star,
            "xi_f_star": self.xi_f_star,
            "d_star": self.d_star,
            "mu_f_star": self.mu_f_star,
            "w_star": self.w_star,
            "bias_star": self.bias_star,
            "iterations": self.iterations,
        }


def _spd_solve(G: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    """Solve ``G X = rhs`` for symmetric positive definite ``G`` with a conditioning guard."""
    G = 0.5 * (G + G.T)
    lam = np.linalg.eigvalsh(G)
    if lam[0] <= 0 or lam[-1] > GRAM_COND_MAX * lam[0]:
        cond = np.inf if lam[0] <= 0 else lam[-1] / lam[0]
        raise SingularGram(f"{what} Gram matrix is numerically singular (condition {cond:.3g})")
    return cho_solve(cho_factor(G), rhs)


def weights_from_xi_w(bundle: GeometryBundle, xi_w) -> np.ndarray:
    """Invert ``Xi_W = R_L J W^T``; exact on the row space of R_L, zero on its null space."""
    jinv = 1.0 / np.diag(bundle.j_mat)
    wt = jinv[:, None] * (np.linalg.pinv(bundle.r_l) @ np.asarray(xi_w, dtype=float))
    return wt.T


def bias_shift(bundle: GeometryBundle, w, mu_f) -> np.ndarray:
    """The ``d`` that zeroes the mismatch term: ``-W^T mu_f + J^{-1}(mu_a - a_PY)``."""
    jinv = 1.0 / np.diag(bundle.j_mat)
    return -np.asarray(w, dtype=float).T @ np.asarray(mu_f, dtype=float) + jinv * (bundle.mu_a - bundle.a_py)


def _ls_weight(b_tilde, xi_f):
    G = xi_f @ xi_f.T
    return _spd_solve(G, xi_f @ b_tilde.T, "feature").T


def _ls_feature(b_tilde, xi_w):
    G = xi_w.T @ xi_w
    return _spd_solve(G, xi_w.T @ b_tilde, "weight")


def optimal_weight(bundle: GeometryBundle, xi_f, mu_f) -> tuple[np.ndarray, np.ndarray]:
    """Best ``Xi_W`` for fixed features, and the bias shift ``d`` that zeroes the mismatch term."""
    xi_f = np.atleast_2d(np.asarray(xi_f, dtype=float))
    xi_w = _ls_weight(bundle.b_tilde_mat, xi_f)
    return xi_w, bias_shift(bundle, weights_from_xi_w(bundle, xi_w), mu_f)


def optimal_feature(bundle: GeometryBundle, xi_w, d) -> tuple[np.ndarray, np.ndarray]:
    """Best ``Xi_f`` and mean feature for fixed weights and bias shift."""
    xi_w = np.atleast_2d(np.asarray(xi_w, dtype=float))
    xi_f = _ls_feature(bundle.b_tilde_mat, xi_w)
    c = bundle.r_l @ (bundle.a_py - bundle.mu_a + bundle.j_mat @ np.asarray(d, dtype=float))
    mu_f = -_spd_solve(xi_w.T @ xi_w, xi_w.T @ c, "weight")
    return xi_f, mu_f


def truncated_svd(b_tilde, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` singular triplets ``(U_k, sigma_k, V_k)`` with ``V_k`` of shape ``|X| x k``.

    Each right singular vector is signed so its first non-negligible entry is
    positive; the matching left vector flips with it.
    """
    b_tilde = np.atleast_2d(np.asarray(b_tilde, dtype=float))
    if not 1 <= k <= min(b_tilde.shape):
        raise RankTooLarge(f"k={k} outside [1, {min(b_tilde.shape)}]")
    U, s, Vt = np.linalg.svd(b_tilde, full_matrices=False)
    U, s, Vt = U[:, :k].copy(), s[:k].copy(), Vt[:k].copy()
    for i in range(k):
        row = Vt[i]
        nz = np.flatnonzero(np.abs(row) > 1e-12 * max(np.abs(row).max(), 1e-300))
        if nz.size and row[nz[0]] < 0:
            Vt[i] *= -1.0
            U[:, i] *= -1.0
    return U, s, Vt.T


def padded_singular_values(bundle: GeometryBundle) -> np.ndarray:
    """Singular values of ``B~`` padded with zeros to ``K = min(n, |X|)``."""
    K = min(bundle.n, bundle.n_inputs)
    s = np.linalg.svd(bundle.b_tilde_mat, compute_uv=False) if bundle.b_tilde_mat.size else np.zeros(0)
    out = np.zeros(K)
    m = min(K, s.size)
    out[:m] = s[:m]
    return out


def _frob2(a) -> float:
    return float(np.sum(np.asarray(a) ** 2))


def _finish(bundle, xi_w, xi_f, mu_f, sv, k, method, iterations=0, trace=()):
    mu_f = np.zeros(xi_f.shape[0]) if mu_f is None else np.asarray(mu_f, dtype=float)
    w = weights_from_xi_w(bundle, xi_w)
    d = bias_shift(bundle, w, mu_f)
    return LayerAnalysis(
        xi_w_star=xi_w,
        xi_f_star=xi_f,
        d_star=d,
        mu_f_star=mu_f,
        singular_values=sv,
        rank_k=k,
        ey_bound=float(np.sum(sv[k:] ** 2)),
        achieved_frobenius=_frob2(bundle.b_tilde_mat - xi_w @ xi_f),
        w_star=w,
        bias_star=bundle.b_tilde_vec + d,
        method=method,
        iterations=iterations,
        trace=tuple(trace),
    )


def solve_layer(bundle: GeometryBundle, k: int, mu_f=None, gauge: str = "balanced",
                width: int | None = None) -> LayerAnalysis:
    """Jointly optimal rank-``k`` weights, features and biases from the truncated SVD.

    ``gauge="balanced"`` splits ``sqrt(Sigma_k)`` between the factors;
    ``gauge="unit_weight"`` gives ``Xi_W = U_k`` and ``Xi_f = Sigma_k V_k^T``.
    Triplets beyond the rank of ``B~`` are zero-padded, and so are factor
    columns beyond ``k`` when the feature ``width`` is larger than the rank.
    """
    K = min(bundle.n, bundle.n_inputs)
    if not 1 <= k <= K:
        raise RankTooLarge(f"rank {k} violates 1 <= k <= min(n, |X|) = {K}")
    if gauge not in ("balanced", "unit_weight"):
        raise ValueError(f"unknown gauge {gauge!r}")
    width = k if width is None else int(width)
    if width < k:
        raise ValueError(f"feature width {width} is below the rank {k}")
    sv = padded_singular_values(bundle)
    r, nx = bundle.b_tilde_mat.shape
    m = min(k, r, nx)
    xi_w = np.zeros((r, width))
    xi_f = np.zeros((width, nx))
    if m > 0:
        U, s, V = truncated_svd(bundle.b_tilde_mat, m)
        if gauge == "balanced":
            root = np.sqrt(s)
            xi_w[:, :m] = U * root
            xi_f[:m] = root[:, None] * V.T
        else:
            xi_w[:, :m] = U
            xi_f[:m] = s[:, None] * V.T
    return _finish(bundle, xi_w, xi_f, mu_f, sv, k, "svd")


def alternate(bundle: GeometryBundle, k: int, init_xi_f, max_iter: int = 500, tol: float = 1e-13,
              mu_f=None) -> LayerAnalysis:
    """Alternate the two least-squares half-steps (a block power iteration).

    Stops once the product moves by at most ``tol`` in Frobenius norm, then
    checks the result against the truncated SVD.
    """
    K = min(bundle.n, bundle.n_inputs)
    if not 1 <= k <= K:
        raise RankTooLarge(f"rank {k} violates 1 <= k <= min(n, |X|) = {K}")
    sv = padded_singular_values(bundle)
    sigma_next = sv[k] if k < sv.size else 0.0
    if sv[0] <= 0 or sv[k - 1] - sigma_next < GAP_FRACTION * sv[0]:
        raise NoGap(f"spectral gap sigma_{k} - sigma_{k + 1} = {sv[k - 1] - sigma_next:.3e} "
                    f"is below {GAP_FRACTION:g} * sigma_1 = {GAP_FRACTION * sv[0]:.3e}")
    b_tilde = bundle.b_tilde_mat
    xi_f = np.atleast_2d(np.asarray(init_xi_f, dtype=float))
    if xi_f.shape != (k, bundle.n_inputs):
        raise ValueError(f"init_xi_f has shape {xi_f.shape}, expected {(k, bundle.n_inputs)}")
    U, s, V = truncated_svd(b_tilde, k)
    overlap = np.linalg.svd(xi_f @ V, compute_uv=False)
    if overlap.min() <= 1e-10 * max(np.linalg.norm(xi_f), 1e-300):
        raise NonConvergence("initial features are orthogonal to the top-k right singular subspace")
    prev = None
    trace = []
    try:
        for it in range(1, max_iter + 1):
            xi_w = _ls_weight(b_tilde, xi_f)
            xi_f = _ls_feature(b_tilde, xi_w)
            prod = xi_w @ xi_f
            trace.append(_frob2(b_tilde - prod))
            if prev is not None and np.linalg.norm(prod - prev) <= tol:
                break
            prev = prod
        else:
            raise NonConvergence(f"alternating solver did not settle in {max_iter} iterations")
    except SingularGram as exc:
        raise NonConvergence(f"alternating solver lost rank: {exc}") from exc
    target = (U * s) @ V.T
    err = float(np.linalg.norm(prod - target))
    if err > SVD_MATCH_TOL:
        raise NonConvergence(f"alternating product is {err:.3e} away from the truncated SVD")
    return _finish(bundle, xi_w, xi_f, mu_f, sv, k, "alternate", it, trace)


def feature_table(bundle: GeometryBundle, xi_f, mu_f) -> np.ndarray:
    """Per-input feature vectors ``mu_f + xi_f(x) / sqrt(P_X(x))`` as a ``k x |X|`` table."""
    return np.asarray(mu_f, dtype=float)[:, None] + np.asarray(xi_f, dtype=float) / bundle.sqrt_px
