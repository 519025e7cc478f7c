"""Scalar activations with derivative and inverse, and the local-slope certificate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfImage

KINDS = ("identity", "sigmoid", "tanh", "leaky_relu", "softplus")


@dataclass(frozen=True)
class Activation:
    kind: str
    slope: float = 0.01  # negative-branch slope, leaky_relu only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {KINDS}")
        if self.kind == "leaky_relu" and not self.slope > 0:
            raise ValueError("leaky_relu slope must be positive")

    @property
    def name(self) -> str:
        if self.kind == "leaky_relu":
            return f"leaky_relu:{self.slope!r}"
        return self.kind

    @property
    def image_interval(self) -> tuple[float, float]:
        return {
            "identity": (-np.inf, np.inf),
            "sigmoid": (0.0, 1.0),
            "tanh": (-1.0, 1.0),
            "leaky_relu": (-np.inf, np.inf),
            "softplus": (0.0, np.inf),
        }[self.kind]

    def eval(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "identity":
            return z.copy()
        if self.kind == "sigmoid":
            return _sigmoid(z)
        if self.kind == "tanh":
            return np.tanh(z)
        if self.kind == "leaky_relu":
            return np.where(z >= 0, z, self.slope * z)
        return np.logaddexp(0.0, z)

    def deriv(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "identity":
            return np.ones_like(z)
        if self.kind == "sigmoid":
            s = _sigmoid(z)
            return s * (1.0 - s)
        if self.kind == "tanh":
            return 1.0 - np.tanh(z) ** 2
        if self.kind == "leaky_relu":
            # right-hand slope at the kink
            return np.where(z >= 0, 1.0, self.slope)
        return _sigmoid(z)

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        lo, hi = self.image_interval
        if np.any(~np.isfinite(v)) or np.any(v <= lo) or np.any(v >= hi):
            raise OutOfImage(f"{self.name} cannot invert {v!r}: image is the open interval ({lo}, {hi})")
        if self.kind == "identity":
            return v.copy()
        if self.kind == "sigmoid":
            return np.log(v) - np.log1p(-v)
        if self.kind == "tanh":
            return np.arctanh(v)
        if self.kind == "leaky_relu":
            return np.where(v >= 0, v, v / self.slope)
        # softplus^{-1}(v) = log(e^v - 1), written to stay finite for large v
        return v + np.log(-np.expm1(-v))

    def jacobian(self, b):
        """Jacobian of the coordinatewise map at ``b``: a diagonal matrix."""
        return np.diag(self.deriv(np.asarray(b, dtype=float)))


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def parse_activation(name: str) -> Activation:
    """Parse CLI names such as ``"tanh"`` or ``"leaky_relu:0.05"``."""
    kind, _, arg = name.strip().partition(":")
    if kind == "leaky_relu":
        return Activation("leaky_relu", float(arg) if arg else 0.01)
    if arg:
        raise ValueError(f"activation {kind!r} takes no parameter")
    return Activation(kind)


@dataclass(frozen=True)
class GradientCertificate:
    center: float
    delta: float
    k_lower: float
    verified: bool

    def to_dict(self) -> dict:
        return {
            "center": self.center,
            "delta": self.delta,
            "k_lower": self.k_lower,
            "verified": self.verified,
        }


def _check_probes(act, center: float, delta: float, k_lower: float, probes: int) -> bool:
    # equally spaced interior points of (center - delta, center + delta), center excluded
    z = center + delta * np.linspace(-1.0, 1.0, probes + 2)[1:-1]
    z = z[z != center]
    gap = np.abs(np.asarray(act.eval(z), dtype=float) - float(act.eval(center)))
    return bool(np.all(gap >= k_lower * np.abs(z - center)))


def certify_assumption1(act, center: float, delta: float | None = None, probes: int = 200) -> GradientCertificate:
    """Check ``|h(z) - h(c)| >= K |z - c|`` on a probe grid around ``c`` with ``K = h'(c) / 2``.

    ``act`` is anything with vectorised ``eval`` and ``deriv``. With ``delta=None`` the
    radius starts at 1 and is halved until every probe passes or it drops below 1e-6.
    """
    if probes < 100:
        raise ValueError("certification needs at least 100 probes")
    center = float(center)
    k_lower = float(act.deriv(center)) / 2.0
    if not k_lower > 0:
        return GradientCertificate(center, float(delta or 0.0), k_lower, False)
    if delta is not None:
        return GradientCertificate(center, float(delta), k_lower, _check_probes(act, center, delta, k_lower, probes))
    delta = 1.0
    while delta >= 1e-6:
        if _check_probes(act, center, delta, k_lower, probes):
            return GradientCertificate(center, delta, k_lower, True)
        delta *= 0.5
    return GradientCertificate(center, delta, k_lower, False)
