import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomlens.dist import (JointDistribution, bayes_deviation_bound, chi2_mutual_information, double_center,
                           make_direction, make_rng, max_eps, perturb, product, random_marginal)
from geomlens.errors import DegenerateDirection, EpsilonTooLarge, InvalidDistribution

HALF = np.array([0.5, 0.5])
CHECKER = np.array([[1.0, -1.0], [-1.0, 1.0]])


def chi2_by_summation(p_xy):
    """Four-nested-loop reference, no vectorisation."""
    nx, ny = p_xy.shape
    px = [sum(p_xy[x, y] for y in range(ny)) for x in range(nx)]
    py = [sum(p_xy[x, y] for x in range(nx)) for y in range(ny)]
    total = 0.0
    for x in range(nx):
        for y in range(ny):
            total += (p_xy[x, y] - px[x] * py[y]) ** 2 / (px[x] * py[y])
    return total


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    nx = draw(st.integers(2, 6))
    ny = draw(st.integers(2, 6))
    rng = make_rng(seed)
    return random_marginal(rng, nx), random_marginal(rng, ny), seed


class TestJointDistribution:
    def test_rejects_bad_sum(self):
        with pytest.raises(InvalidDistribution):
            JointDistribution(np.array([[0.3, 0.3], [0.2, 0.3]]))

    def test_rejects_negative(self):
        with pytest.raises(InvalidDistribution):
            JointDistribution(np.array([[0.6, -0.1], [0.2, 0.3]]))

    def test_rejects_marginal_below_floor(self):
        with pytest.raises(InvalidDistribution):
            JointDistribution(np.array([[0.5, 0.5], [1e-8, 0.0]]) / (1 + 1e-8))

    def test_conditionals_sum_to_one(self):
        j = perturb([0.2, 0.3, 0.5], [0.6, 0.4], make_direction([0.2, 0.3, 0.5], [0.6, 0.4], seed=3), 0.1)
        np.testing.assert_allclose(j.p_y_given_x.sum(axis=1), 1.0, atol=1e-12)

    def test_arrays_are_read_only(self):
        j = product(HALF, HALF)
        with pytest.raises(ValueError):
            j.p_xy[0, 0] = 1.0

    def test_dict_round_trip(self):
        j = perturb(HALF, HALF, make_direction(HALF, HALF, raw=CHECKER), 0.2)
        again = JointDistribution.from_dict(j.to_dict())
        np.testing.assert_array_equal(again.p_xy, j.p_xy)
        assert again.labels_x == (0, 1)


class TestChi2:
    def test_product_is_zero(self):
        assert chi2_mutual_information(product([0.1, 0.9], [0.3, 0.3, 0.4])) == pytest.approx(0.0, abs=1e-15)

    def test_two_by_two_hand_value(self):
        d = 0.05
        p = np.array([[0.25 + d, 0.25 - d], [0.25 - d, 0.25 + d]])
        # each cell contributes d^2 / 0.25
        assert chi2_mutual_information(JointDistribution(p)) == pytest.approx(4 * d**2 / 0.25, abs=1e-14)
        assert chi2_mutual_information(JointDistribution(p)) == pytest.approx(0.04, abs=1e-14)

    def test_generator_at_eps_point_one(self):
        px, py = [0.2, 0.3, 0.5], [0.25, 0.25, 0.5]
        j = perturb(px, py, make_direction(px, py, seed=5), 0.1)
        assert chi2_by_summation(j.p_xy) == pytest.approx(0.01, abs=1e-12)


class TestDirection:
    def test_checkerboard_is_fixed_point(self):
        d = make_direction(HALF, HALF, raw=CHECKER)
        np.testing.assert_allclose(d.phi, CHECKER, atol=1e-15)
        assert d.normalization == pytest.approx(1.0, abs=1e-15)

    def test_constant_raw_is_degenerate(self):
        with pytest.raises(DegenerateDirection):
            make_direction([0.2, 0.8], [0.5, 0.25, 0.25], raw=np.ones((2, 3)))

    def test_additive_raw_is_degenerate(self):
        raw = np.add.outer([1.0, -2.0, 0.5], [3.0, 0.1])
        with pytest.raises(DegenerateDirection):
            make_direction([0.2, 0.3, 0.5], [0.4, 0.6], raw=raw)

    def test_seed_seven(self):
        px, py = np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.5, 0.2, 0.3])
        d = make_direction(px, py, seed=7)
        np.testing.assert_allclose(d.phi @ py, 0.0, atol=1e-12)
        np.testing.assert_allclose(px @ d.phi, 0.0, atol=1e-12)
        assert np.sum(np.outer(px, py) * d.phi**2) == pytest.approx(1.0, abs=1e-12)

    def test_seed_is_reproducible(self):
        a = make_direction(HALF, [0.3, 0.7], seed=42).phi
        b = make_direction(HALF, [0.3, 0.7], seed=42).phi
        np.testing.assert_array_equal(a, b)

    def test_double_center_is_idempotent(self):
        rng = make_rng(1)
        px, py = random_marginal(rng, 4), random_marginal(rng, 3)
        once = double_center(rng.standard_normal((4, 3)), px, py)
        np.testing.assert_allclose(double_center(once, px, py), once, atol=1e-14)

    def test_needs_raw_or_seed(self):
        with pytest.raises(ValueError):
            make_direction(HALF, HALF)


class TestPerturb:
    def test_eps_zero_is_product(self):
        px, py = [0.2, 0.8], [0.1, 0.6, 0.3]
        j = perturb(px, py, make_direction(px, py, seed=2), 0.0)
        np.testing.assert_array_equal(j.p_xy, np.outer(px, py))

    def test_two_by_two_fixture(self):
        j = perturb(HALF, HALF, make_direction(HALF, HALF, raw=CHECKER), 0.2)
        np.testing.assert_allclose(j.p_xy, [[0.3, 0.2], [0.2, 0.3]], atol=1e-15)
        assert chi2_by_summation(j.p_xy) == pytest.approx(0.04, abs=1e-14)

    def test_eps_too_large(self):
        with pytest.raises(EpsilonTooLarge):
            perturb(HALF, HALF, make_direction(HALF, HALF, raw=CHECKER), 1.5)

    def test_negative_eps(self):
        with pytest.raises(EpsilonTooLarge):
            perturb(HALF, HALF, make_direction(HALF, HALF, raw=CHECKER), -0.1)

    def test_max_eps_is_sharp(self):
        px, py = [0.3, 0.7], [0.6, 0.4]
        d = make_direction(px, py, seed=9)
        perturb(px, py, d, 0.999 * max_eps(d))
        with pytest.raises(EpsilonTooLarge):
            perturb(px, py, d, max_eps(d))

    @settings(max_examples=40, deadline=None)
    @given(instances(), st.floats(0.0, 0.95))
    def test_marginals_preserved(self, inst, frac):
        px, py, seed = inst
        d = make_direction(px, py, seed=seed)
        j = perturb(px, py, d, frac * max_eps(d))
        np.testing.assert_allclose(j.p_x, px, atol=1e-14, rtol=0)
        np.testing.assert_allclose(j.p_y, py, atol=1e-14, rtol=0)

    @settings(max_examples=40, deadline=None)
    @given(instances(), st.floats(0.0, 0.95))
    def test_exact_dial(self, inst, frac):
        px, py, seed = inst
        d = make_direction(px, py, seed=seed)
        eps = frac * max_eps(d)
        assert chi2_mutual_information(perturb(px, py, d, eps)) == pytest.approx(eps**2, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(instances(), st.floats(0.0, 0.95))
    def test_conditional_deviation_bound(self, inst, frac):
        px, py, seed = inst
        d = make_direction(px, py, seed=seed)
        j = perturb(px, py, d, frac * max_eps(d))
        dev = np.sum((j.p_y_given_x - j.p_y) ** 2, axis=1)
        assert np.all(dev <= bayes_deviation_bound(j) + 1e-15)


class TestRng:
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(make_rng(123).random(5), make_rng(123).random(5))

    def test_marginal_above_floor(self):
        rng = make_rng(0)
        for size in range(2, 10):
            p = random_marginal(rng, size)
            assert p.min() >= 0.2 / size - 1e-15
            assert p.sum() == pytest.approx(1.0, abs=1e-15)
