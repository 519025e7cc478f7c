"""Seeded problem generators shared by the CLI, the tests and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .activations import Activation
from .dist import (JointDistribution, PerturbationDirection, make_direction, make_rng, max_eps, perturb,
                   random_marginal)
from .losses import LossModel


@dataclass(frozen=True)
class Problem:
    """Marginals, a perturbation direction, a loss and an output activation."""

    p_x: np.ndarray
    p_y: np.ndarray
    direction: PerturbationDirection
    model: LossModel
    activation: Activation

    def joint(self, eps: float) -> JointDistribution:
        return perturb(self.p_x, self.p_y, self.direction, eps)

    @property
    def max_eps(self) -> float:
        return max_eps(self.direction)


def random_problem(seed: int, kind: str, n_inputs: int, n_labels: int, n_out: int | None = None,
                   min_max_eps: float = 0.25) -> Problem:
    """Random marginals and direction; redraws the direction until ``max_eps`` clears ``min_max_eps``.

    Log-loss problems use a sigmoid head. Squared-error problems use a tanh head
    and labels embedded in ``[-0.8, 0.8]^n_out`` so the mean stays in its image.
    """
    rng = make_rng(seed)
    p_x = random_marginal(rng, n_inputs)
    p_y = random_marginal(rng, n_labels)
    if kind == "log":
        model, act = LossModel.log(n_labels), Activation("sigmoid")
    elif kind == "l2":
        n_out = n_labels - 1 if n_out is None else n_out
        model, act = LossModel.squared_error(rng.uniform(-0.8, 0.8, (n_labels, n_out))), Activation("tanh")
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    for _ in range(1000):
        direction = make_direction(p_x, p_y, raw=rng.standard_normal((n_inputs, n_labels)))
        if max_eps(direction) > min_max_eps:
            return Problem(p_x, p_y, direction, model, act)
    raise RuntimeError("could not draw a direction with a large enough admissible eps")


def uniform_fixture(eps: float = 0.2) -> JointDistribution:
    """2 x 2 uniform marginals with the checkerboard direction."""
    half = np.array([0.5, 0.5])
    direction = make_direction(half, half, raw=[[1.0, -1.0], [-1.0, 1.0]])
    return perturb(half, half, direction, eps)


def unit_directions(seed: int, *shapes) -> list[np.ndarray]:
    """Fixed random directions of unit Frobenius norm, one per shape."""
    rng = make_rng(seed)
    out = []
    for shape in shapes:
        v = rng.standard_normal(shape)
        out.append(v / np.linalg.norm(v))
    return out
