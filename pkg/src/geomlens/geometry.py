"""Per-layer matrices of the local analysis and the quadratic surrogate objective.

Shapes: ``n`` actions, ``k`` features, ``|X|`` inputs, ``r = rank(M_L)``.
Feature tables ``f`` are ``k x |X|`` (column ``x`` is ``f(x)``); weights ``w`` are
``k x n`` so the pre-activation at ``x`` is ``w.T @ f[:, x] + b``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activations import Activation
from .dist import JointDistribution
from .errors import InvariantViolation
from .losses import BayesSolution, LossModel, bayes_action, expected_loss, hessian_ml
from .numerics import psd_factor

INVARIANT_TOL = 1e-10


@dataclass(frozen=True)
class GeometryBundle:
    p_x: np.ndarray
    sqrt_px: np.ndarray
    bayes_actions: np.ndarray  # n x |X|, column x is the Bayes action of P(.|x)
    cond_risks: np.ndarray  # |X|, Bayes risk of each conditional
    a_py: np.ndarray
    mu_a: np.ndarray
    b_mat: np.ndarray
    b_tilde_vec: np.ndarray
    m_l: np.ndarray
    r_l: np.ndarray
    j_mat: np.ndarray
    b_tilde_mat: np.ndarray
    activation: Activation
    xi_f: np.ndarray | None = None
    mu_f: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.a_py.size

    @property
    def n_inputs(self) -> int:
        return self.p_x.size

    @property
    def rank_ml(self) -> int:
        return self.r_l.shape[0]


def feature_matrix(p_x, f) -> tuple[np.ndarray, np.ndarray]:
    """Centred, sqrt(P_X)-weighted feature matrix and the mean feature."""
    p_x = np.asarray(p_x, dtype=float)
    f = np.atleast_2d(np.asarray(f, dtype=float))
    mu = f @ p_x
    return np.sqrt(p_x) * (f - mu[:, None]), mu


def bundle_from_actions(p_x, actions, a_py, m_l, act: Activation, f=None, cond_risks=None) -> GeometryBundle:
    """Assemble a bundle from Bayes actions already computed for each conditional."""
    p_x = np.asarray(p_x, dtype=float)
    actions = np.asarray(actions, dtype=float)
    a_py = np.asarray(a_py, dtype=float)
    sqrt_px = np.sqrt(p_x)
    mu_a = actions @ p_x
    b_mat = sqrt_px * (actions - mu_a[:, None])
    b_tilde = act.inverse(a_py)
    r_l = psd_factor(m_l)
    xi_f = mu_f = None
    if f is not None:
        xi_f, mu_f = feature_matrix(p_x, f)
    if cond_risks is None:
        cond_risks = np.full(p_x.size, np.nan)
    return GeometryBundle(
        p_x=p_x,
        sqrt_px=sqrt_px,
        bayes_actions=actions,
        cond_risks=np.asarray(cond_risks, dtype=float),
        a_py=a_py,
        mu_a=mu_a,
        b_mat=b_mat,
        b_tilde_vec=b_tilde,
        m_l=np.asarray(m_l, dtype=float),
        r_l=r_l,
        j_mat=act.jacobian(b_tilde),
        b_tilde_mat=r_l @ b_mat,
        activation=act,
        xi_f=xi_f,
        mu_f=mu_f,
    )


def conditional_bayes(j: JointDistribution, model: LossModel, init=None) -> tuple[BayesSolution, list[BayesSolution]]:
    """Bayes solution for P_Y, then for every P(.|x) warm-started from it."""
    marginal = bayes_action(model, j.p_y, init=init)
    conds = [bayes_action(model, q, init=marginal.action) for q in j.p_y_given_x]
    return marginal, conds


def build_bundle(j: JointDistribution, model: LossModel, act: Activation, f=None, init=None) -> GeometryBundle:
    marginal, conds = conditional_bayes(j, model, init=init)
    actions = np.column_stack([s.action for s in conds])
    m_l = hessian_ml(model, j.p_y, marginal)
    return bundle_from_actions(
        j.p_x, actions, marginal.action, m_l, act, f=f, cond_risks=[s.risk for s in conds]
    )


def actions_of(act: Activation, f, w, b) -> np.ndarray:
    f = np.atleast_2d(np.asarray(f, dtype=float))
    return act.eval(np.asarray(w, dtype=float).T @ f + np.asarray(b, dtype=float)[:, None])


def true_objective(j: JointDistribution, model: LossModel, act: Activation, f, w, b,
                   cond_risks=None) -> float:
    """Exact ``sum_x P_X(x) D_L(a_{P(.|x)} || h(w^T f(x) + b))``.

    ``cond_risks`` (Bayes risk per conditional) may be passed to skip re-solving
    numeric Bayes problems.
    """
    acts = actions_of(act, f, w, b)
    if cond_risks is None:
        cond_risks = [bayes_action(model, q).risk for q in j.p_y_given_x]
    total = 0.0
    for x, q in enumerate(j.p_y_given_x):
        total += j.p_x[x] * (expected_loss(model, q, acts[:, x]) - cond_risks[x])
    return float(total)


def eta(bundle: GeometryBundle, w, d, mu_f) -> float:
    """Quadratic form of the bias/mean mismatch in the M_L metric."""
    J = bundle.j_mat
    v = bundle.a_py - bundle.mu_a + J @ np.asarray(d, dtype=float) + J @ np.asarray(w, dtype=float).T @ np.asarray(mu_f, dtype=float)
    rv = bundle.r_l @ v
    return float(rv @ rv)


def xi_w(bundle: GeometryBundle, w) -> np.ndarray:
    return bundle.r_l @ bundle.j_mat @ np.asarray(w, dtype=float).T


def surrogate_objective(bundle: GeometryBundle, w, b, f) -> tuple[float, float, float]:
    """Return ``(total, frobenius_term, eta_term)`` of the quadratic surrogate.

    ``frobenius_term = 1/2 ||B~ - Xi_W Xi_f||_F^2`` and ``eta_term = 1/2 eta(d, f)``.
    """
    xf, mu_f = feature_matrix(bundle.p_x, f)
    resid = bundle.b_tilde_mat - xi_w(bundle, w) @ xf
    frob = 0.5 * float(np.sum(resid**2))
    eta_term = 0.5 * eta(bundle, w, np.asarray(b, dtype=float) - bundle.b_tilde_vec, mu_f)
    return frob + eta_term, frob, eta_term


def invariant_residuals(bundle: GeometryBundle) -> dict[str, float]:
    res = {
        "b_tilde_null": float(np.linalg.norm(bundle.b_tilde_mat @ bundle.sqrt_px)),
        "factor": float(np.linalg.norm(bundle.r_l.T @ bundle.r_l - bundle.m_l)),
        "jacobian_offdiag": float(np.linalg.norm(bundle.j_mat - np.diag(np.diag(bundle.j_mat)))),
    }
    if bundle.xi_f is not None:
        res["xi_f_null"] = float(np.linalg.norm(bundle.xi_f @ bundle.sqrt_px))
    return res


def assert_invariants(bundle: GeometryBundle, tol: float = INVARIANT_TOL) -> dict[str, float]:
    res = invariant_residuals(bundle)
    scale = max(1.0, float(np.abs(bundle.m_l).max()))
    bad = {k: v for k, v in res.items() if v > tol * (scale if k == "factor" else 1.0)}
    if np.any(np.diag(bundle.j_mat) <= 0):
        bad["jacobian_positive"] = float(np.diag(bundle.j_mat).min())
    if bad:
        raise InvariantViolation(f"bundle invariants violated: {bad}")
    return res


def bundle_to_dict(bundle: GeometryBundle) -> dict:
    def mat(a):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        return {"shape": list(a.shape), "data": a}

    out = {
        "activation": bundle.activation.name,
        "p_x": bundle.p_x,
        "sqrt_px": bundle.sqrt_px,
        "a_py": bundle.a_py,
        "mu_a": bundle.mu_a,
        "b_tilde_vec": bundle.b_tilde_vec,
        "bayes_actions": mat(bundle.bayes_actions),
        "b_mat": mat(bundle.b_mat),
        "m_l": mat(bundle.m_l),
        "r_l": {"shape": list(bundle.r_l.shape), "data": bundle.r_l},
        "j_mat": mat(bundle.j_mat),
        "b_tilde_mat": {"shape": list(bundle.b_tilde_mat.shape), "data": bundle.b_tilde_mat},
    }
    if bundle.xi_f is not None:
        out["xi_f"] = mat(bundle.xi_f)
        out["mu_f"] = bundle.mu_f
    return out
