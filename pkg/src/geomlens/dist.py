"""Finite joint distributions and the epsilon-dependent family around a product.

The family is multiplicative, ``P_XY = P_X P_Y (1 + eps * phi)`` with ``phi``
double-centred under the marginals, so both marginals are preserved exactly
and the chi-squared mutual information equals ``eps**2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateDirection, EpsilonTooLarge, InvalidDistribution

SUM_TOL = 1e-12
MARGINAL_FLOOR = 1e-6


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; PCG64 streams are identical across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_marginal(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise InvalidDistribution(f"{name} must be a non-empty vector")
    if abs(p.sum() - 1.0) > SUM_TOL:
        raise InvalidDistribution(f"{name} sums to {p.sum():.17g}, not 1")
    if p.min() < MARGINAL_FLOOR:
        raise InvalidDistribution(f"{name} has an entry below the floor {MARGINAL_FLOOR:g}")
    return p


@dataclass(frozen=True)
class JointDistribution:
    p_xy: np.ndarray
    labels_x: tuple = field(default=None)
    labels_y: tuple = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.p_xy, dtype=float)
        if p.ndim != 2 or min(p.shape) < 1:
            raise InvalidDistribution("p_xy must be a non-empty |X| x |Y| matrix")
        if not np.all(np.isfinite(p)) or p.min() < 0:
            raise InvalidDistribution("p_xy entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise InvalidDistribution(f"p_xy sums to {p.sum():.17g}, not 1")
        object.__setattr__(self, "p_xy", _frozen(p))
        for name, size in (("labels_x", p.shape[0]), ("labels_y", p.shape[1])):
            labels = getattr(self, name)
            labels = tuple(range(size)) if labels is None else tuple(labels)
            if len(labels) != size:
                raise InvalidDistribution(f"{name} has {len(labels)} entries, expected {size}")
            object.__setattr__(self, name, labels)
        if self.p_x.min() < MARGINAL_FLOOR or self.p_y.min() < MARGINAL_FLOOR:
            raise InvalidDistribution(f"marginal probability below the floor {MARGINAL_FLOOR:g}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.p_xy.shape

    @cached_property
    def p_x(self) -> np.ndarray:
        return _frozen(self.p_xy.sum(axis=1))

    @cached_property
    def p_y(self) -> np.ndarray:
        return _frozen(self.p_xy.sum(axis=0))

    @cached_property
    def p_y_given_x(self) -> np.ndarray:
        return _frozen(self.p_xy / self.p_x[:, None])

    def to_dict(self) -> dict:
        return {
            "p_xy": self.p_xy,
            "labels_x": list(self.labels_x),
            "labels_y": list(self.labels_y),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointDistribution":
        return cls(np.asarray(d["p_xy"], dtype=float), d.get("labels_x"), d.get("labels_y"))


def product(p_x, p_y) -> JointDistribution:
    p_x = _check_marginal(p_x, "p_x")
    p_y = _check_marginal(p_y, "p_y")
    return JointDistribution(np.outer(p_x, p_y))


def chi2_mutual_information(j: JointDistribution) -> float:
    indep = np.outer(j.p_x, j.p_y)
    return float(np.sum((j.p_xy - indep) ** 2 / indep))


@dataclass(frozen=True)
class PerturbationDirection:
    phi: np.ndarray
    normalization: float


def double_center(raw, p_x, p_y) -> np.ndarray:
    """Remove weighted row and column means: rows centred under p_y, columns under p_x."""
    raw = np.asarray(raw, dtype=float)
    row_mean = raw @ p_y
    col_mean = p_x @ raw
    grand = p_x @ raw @ p_y
    return raw - row_mean[:, None] - col_mean[None, :] + grand


def make_direction(p_x, p_y, raw=None, seed: int | None = None) -> PerturbationDirection:
    """Double-centre ``raw`` (or a seeded Gaussian matrix) and scale it to unit P_X P_Y norm."""
    p_x = _check_marginal(p_x, "p_x")
    p_y = _check_marginal(p_y, "p_y")
    if raw is None:
        if seed is None:
            raise ValueError("make_direction needs either raw or seed")
        raw = make_rng(seed).standard_normal((p_x.size, p_y.size))
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (p_x.size, p_y.size):
        raise ValueError(f"raw has shape {raw.shape}, expected {(p_x.size, p_y.size)}")
    phi = double_center(raw, p_x, p_y)
    weights = np.outer(p_x, p_y)
    norm = float(np.sum(weights * phi**2))
    scale = float(np.sum(weights * raw**2))
    if norm <= 1e-24 * max(scale, 1.0):
        raise DegenerateDirection("direction vanishes after centring under the marginals")
    phi = phi / np.sqrt(norm)
    return PerturbationDirection(_frozen(phi), float(np.sum(weights * phi**2)))


def max_eps(direction: PerturbationDirection) -> float:
    """Supremum of admissible eps: every cell stays strictly positive below it."""
    return 1.0 / float(np.max(np.abs(direction.phi)))


def perturb(p_x, p_y, direction: PerturbationDirection, eps: float) -> JointDistribution:
    p_x = _check_marginal(p_x, "p_x")
    p_y = _check_marginal(p_y, "p_y")
    if eps < 0:
        raise EpsilonTooLarge(f"eps must be non-negative, got {eps}")
    factor = 1.0 + eps * direction.phi
    # compare against the bound too: at eps = max_eps rounding can leave a cell at +1e-17
    if eps >= max_eps(direction) or factor.min() <= 0:
        raise EpsilonTooLarge(
            f"eps={eps:g} makes a cell non-positive; need eps < {max_eps(direction):.6g}"
        )
    return JointDistribution(np.outer(p_x, p_y) * factor)


def random_marginal(rng: np.random.Generator, size: int, concentration: float = 2.0) -> np.ndarray:
    """Dirichlet draw mixed with the uniform so no entry sits near the floor."""
    p = rng.dirichlet(np.full(size, concentration))
    p = 0.8 * p + 0.2 / size
    return p / p.sum()


def bayes_deviation_bound(j: JointDistribution) -> float:
    """Upper bound on sum_y (P(y|x) - P(y))^2 valid for every x."""
    return chi2_mutual_information(j) * float(j.p_y.max()) / float(j.p_x.min())

