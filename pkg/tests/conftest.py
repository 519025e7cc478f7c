from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from geomlens.activations import Activation
from geomlens.geometry import bundle_from_actions
from geomlens.instances import random_problem

ROOT = Path(__file__).resolve().parent.parent
DATA = Path(__file__).resolve().parent / "data"
CONFIGS = ROOT / "configs"

# verdict lines of the acceptance criteria, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def synthetic_bundle(b_tilde, seed: int = 0):
    """A bundle whose whitened target is exactly ``b_tilde`` (r x |X|).

    Uses an identity Hessian, identity head and Bayes actions chosen so that
    ``B = b_tilde``. The columns of ``b_tilde`` are first projected off ``sqrt(p)``
    so that the bundle is internally consistent.
    """
    b_tilde = np.atleast_2d(np.asarray(b_tilde, dtype=float))
    n, nx = b_tilde.shape
    p = np.full(nx, 1.0 / nx)
    s = np.sqrt(p)
    b = b_tilde - np.outer(b_tilde @ s, s)
    a_py = np.random.default_rng(seed).uniform(-0.5, 0.5, n)
    actions = a_py[:, None] + b / s
    return bundle_from_actions(p, actions, a_py, np.eye(n), Activation("identity"))


def raw_bundle(b_tilde):
    """Bundle with ``B~`` equal to ``b_tilde`` verbatim, ignoring the null-vector structure.

    Only for exercising the matrix algebra of the low-rank solvers.
    """
    b_tilde = np.atleast_2d(np.asarray(b_tilde, dtype=float))
    n, nx = b_tilde.shape
    p = np.full(nx, 1.0 / nx)
    bundle = bundle_from_actions(p, np.zeros((n, nx)), np.zeros(n), np.eye(n), Activation("identity"))
    object.__setattr__(bundle, "b_tilde_mat", b_tilde)
    object.__setattr__(bundle, "b_mat", b_tilde)
    return bundle


@pytest.fixture
def log_problem():
    return random_problem(11, "log", 5, 4)


@pytest.fixture
def l2_problem():
    return random_problem(11, "l2", 5, 4)


# property tests draw the same examples on every run
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
