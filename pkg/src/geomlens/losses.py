"""Loss functions, Bayes actions, the excess-loss divergence and its Hessian.

Labels are integer indices into the finite label set. Actions are vectors in
R^n. ``q`` always denotes a strictly positive distribution over labels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import InadmissibleAction, NonConvergence
from .numerics import fd_jacobian_of_gradient

KINDS = ("log", "l2", "composite")


@dataclass(frozen=True)
class LossModel:
    kind: str
    n: int
    y_values: np.ndarray | None = None
    stack: Any = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")

    @classmethod
    def log(cls, n_labels: int) -> "LossModel":
        return cls("log", int(n_labels))

    @classmethod
    def squared_error(cls, y_values) -> "LossModel":
        y = np.array(y_values, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        y.setflags(write=False)
        return cls("l2", y.shape[1], y_values=y)

    @classmethod
    def composite(cls, stack) -> "LossModel":
        """Base loss pre-composed with fixed downstream layers (see ``layerwise``)."""
        return cls("composite", stack.input_dim, stack=stack)

    @property
    def n_labels(self) -> int:
        if self.kind == "log":
            return self.n
        if self.kind == "l2":
            return self.y_values.shape[0]
        return self.stack.base.n_labels


@dataclass(frozen=True)
class BayesSolution:
    action: np.ndarray
    risk: float
    gradient_norm: float
    method: str  # "closed_form" | "numeric"
    iterations: int = 0


def check_action(model: LossModel, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (model.n,):
        raise InadmissibleAction(f"action has shape {a.shape}, expected ({model.n},)")
    if not np.all(np.isfinite(a)):
        raise InadmissibleAction("action has non-finite entries")
    if model.kind == "log" and np.any(a <= 0):
        raise InadmissibleAction("log-loss actions need every coordinate > 0")
    return a


def loss(model: LossModel, y: int, a) -> float:
    a = check_action(model, a)
    if model.kind == "log":
        return float(np.log(a.sum()) - np.log(a[y]))
    if model.kind == "l2":
        return float(0.5 * np.sum((model.y_values[y] - a) ** 2))
    return loss(model.stack.base, y, model.stack.forward(a))


def expected_loss(model: LossModel, q, a) -> float:
    q = np.asarray(q, dtype=float)
    a = check_action(model, a)
    if model.kind == "log":
        return float(np.log(a.sum()) * q.sum() - q @ np.log(a))
    if model.kind == "l2":
        return float(0.5 * q @ np.sum((model.y_values - a) ** 2, axis=1))
    return expected_loss(model.stack.base, q, model.stack.forward(a))


def expected_grad(model: LossModel, q, a) -> np.ndarray:
    """Gradient of ``a -> E_{Y~q} L(Y, a)``."""
    q = np.asarray(q, dtype=float)
    a = check_action(model, a)
    if model.kind == "log":
        return q.sum() / a.sum() - q / a
    if model.kind == "l2":
        return q.sum() * a - q @ model.y_values
    out = model.stack.forward(a)
    return model.stack.pullback(a, expected_grad(model.stack.base, q, out))


def expected_hessian(model: LossModel, q, a) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    a = check_action(model, a)
    if model.kind == "log":
        return np.diag(q / a**2) - q.sum() / a.sum() ** 2
    if model.kind == "l2":
        return q.sum() * np.eye(model.n)
    return fd_jacobian_of_gradient(lambda v: expected_grad(model, q, v), a)


def _safe_value(model, q, a) -> float:
    try:
        return expected_loss(model, q, a)
    except InadmissibleAction:
        return np.inf


def _gradient_descent(model, q, init, tol, max_iter, c=1e-4, shrink=0.5):
    """Steepest descent with Armijo backtracking from a Barzilai-Borwein trial step.

    Near the optimum the Armijo decrease ``c t |g|^2`` drops below the rounding
    level of the objective. There a step is accepted when the value stays within
    a few ulps and the strong-Wolfe curvature test ``|g(a - t g) . g| <= 0.9 |g|^2``
    holds, which only uses gradients.
    """
    a = np.array(init, dtype=float)
    f = expected_loss(model, q, a)
    g = expected_grad(model, q, a)
    gn = float(np.linalg.norm(g))
    step = 1.0
    for it in range(max_iter):
        if gn <= tol:
            return a, f, gn, it
        t = step
        noise = 8 * np.finfo(float).eps * max(abs(f), 1.0)
        while True:
            cand = a - t * g
            fc = _safe_value(model, q, cand)
            if fc <= f - c * t * gn**2:
                gc = expected_grad(model, q, cand)
                break
            if c * t * gn**2 < noise and np.isfinite(fc) and fc <= f + noise:
                gc = expected_grad(model, q, cand)
                if abs(gc @ g) <= 0.9 * gn**2:
                    break
            t *= shrink
            if t < 1e-30:
                raise NonConvergence(f"line search stalled at gradient norm {gn:.3e}")
        s_vec, y_vec = cand - a, gc - g
        a, f, g = cand, fc, gc
        gn = float(np.linalg.norm(g))
        sy = float(s_vec @ y_vec)
        step = float(np.clip(s_vec @ s_vec / sy, 1e-10, 1e10)) if sy > 0 else 2.0 * t
    if gn <= tol:
        return a, f, gn, max_iter
    raise NonConvergence(f"gradient norm {gn:.3e} after {max_iter} iterations (tolerance {tol:.1e})")


def bayes_action(model: LossModel, q, init=None, tol: float = 1e-10, max_iter: int = 100_000) -> BayesSolution:
    """Minimiser of ``E_{Y~q} L(Y, a)``.

    Log loss has the whole ray ``{alpha q}`` as Bayes set; the representative
    ``alpha = 1`` is returned. Composite losses are minimised numerically from
    ``init`` (zeros if omitted).
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_labels,) or np.any(q <= 0):
        raise ValueError("q must be a strictly positive distribution over the labels")
    if model.kind == "log":
        a = q.copy()
        return BayesSolution(a, expected_loss(model, q, a), 0.0, "closed_form")
    if model.kind == "l2":
        a = q @ model.y_values
        return BayesSolution(a, expected_loss(model, q, a), 0.0, "closed_form")
    a0 = np.zeros(model.n) if init is None else np.asarray(init, dtype=float)
    a, f, gn, it = _gradient_descent(model, q, a0, tol, max_iter)
    return BayesSolution(a, f, gn, "numeric", it)


def divergence(model: LossModel, q, a, bayes: BayesSolution | None = None) -> float:
    """Excess expected loss of ``a`` over the Bayes action of ``q``."""
    if bayes is None:
        bayes = bayes_action(model, q)
    return expected_loss(model, q, a) - bayes.risk


def hessian_ml(model: LossModel, q, bayes: BayesSolution | None = None) -> np.ndarray:
    """Hessian of ``a -> E_{Y~q} L(Y, a)`` at the Bayes action."""
    if bayes is None:
        bayes = bayes_action(model, q)
    H = expected_hessian(model, q, bayes.action)
    return 0.5 * (H + H.T)


def parse_loss(name: str, n_labels: int | None = None, y_values=None) -> LossModel:
    if name == "log":
        if n_labels is None:
            raise ValueError("log loss needs the number of labels")
        return LossModel.log(n_labels)
    if name == "l2":
        if y_values is None:
            raise ValueError("l2 loss needs y_values")
        return LossModel.squared_error(y_values)
    raise ValueError(f"unknown loss {name!r}; expected 'log' or 'l2'")
