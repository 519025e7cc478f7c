import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomlens.activations import Activation
from geomlens.errors import NonConvergence, RankTooLarge
from geomlens.geometry import assert_invariants
from geomlens.instances import random_problem
from geomlens.layerwise import (DownstreamStack, SolverConfig, backward_steps, backward_sweep, composite_loss,
                                correspondence_angle, default_ranks, ideal_network, layer_target,
                                solve_hidden_layer, tabular_layer)
from geomlens.losses import LossModel, bayes_action, expected_grad, expected_loss, hessian_ml, loss
from geomlens.lowrank import padded_singular_values
from geomlens.netlab import Layer, forward_all, init_network
from geomlens.numerics import fd_gradient

TANH, SIG, IDENT = Activation("tanh"), Activation("sigmoid"), Activation("identity")


def random_stack(seed, dims, acts, base):
    rng = np.random.default_rng(seed)
    layers = tuple(Layer(rng.normal(0, 0.8, (dims[i], dims[i + 1])), rng.normal(0, 0.3, dims[i + 1]), acts[i])
                   for i in range(len(acts)))
    return DownstreamStack(layers, base)


def anchored_stack(seed, dims, acts, base, p_y):
    """Random stack whose last bias makes ``a = 0`` reproduce the marginal Bayes action.

    A random stack need not reach the Bayes set at all (the infimum then sits at
    infinity); anchoring guarantees a finite minimiser near the origin.
    """
    stack = random_stack(seed, dims, acts, base)
    v = np.zeros(dims[0])
    for layer in stack.layers[:-1]:
        v = layer.apply(v)
    last = stack.layers[-1]
    target = bayes_action(base, p_y).action
    bias = last.activation.inverse(target) - last.weight.T @ v
    return DownstreamStack(stack.layers[:-1] + (Layer(last.weight, bias, last.activation),), base)


def step_by_step(stack, y, a):
    """Independent forward pass written out per layer and per unit."""
    v = list(np.asarray(a, dtype=float))
    for layer in stack.layers:
        kin, kout = layer.weight.shape
        nxt = []
        for o in range(kout):
            z = sum(layer.weight[i, o] * v[i] for i in range(kin)) + layer.bias[o]
            nxt.append(float(layer.activation.eval(z)))
        v = nxt
    if stack.base.kind == "log":
        return -np.log(v[y] / sum(v))
    return 0.5 * sum((stack.base.y_values[y][i] - v[i]) ** 2 for i in range(len(v)))


def warm_net(prob, widths, acts, seed=0):
    """Net whose output bias reproduces the marginal Bayes action at zero pre-activation offset."""
    b_tilde = prob.activation.inverse(bayes_action(prob.model, prob.p_y).action)
    net = init_network(prob.p_x.size, widths, prob.model.n, acts, prob.activation, seed=seed)
    feats, _ = forward_all(net)
    out = net.output
    mean = feats[-1] @ prob.p_x
    return net.with_layers(net.hidden + (Layer(out.weight, b_tilde - out.weight.T @ mean, out.activation),))


class TestStack:
    def test_empty_is_base(self):
        base = LossModel.log(3)
        stack = DownstreamStack((), base)
        a = np.array([0.2, 0.5, 0.3])
        assert composite_loss(stack, 1, a) == loss(base, 1, a)

    def test_identity_layer(self):
        base = LossModel.squared_error([[0.5, -0.5], [0.2, 0.1]])
        stack = DownstreamStack((Layer(np.eye(2), np.zeros(2), TANH),), base)
        a = np.array([0.3, -0.4])
        assert composite_loss(stack, 0, a) == pytest.approx(loss(base, 0, np.tanh(a)), abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_duplicate_forward(self, seed):
        stack = random_stack(seed, [3, 4, 3], [TANH, SIG], LossModel.log(3))
        a = np.random.default_rng(seed).normal(size=3)
        for y in range(3):
            assert composite_loss(stack, y, a) == pytest.approx(step_by_step(stack, y, a), abs=1e-12)

    def test_chain_mismatch(self):
        with pytest.raises(ValueError):
            DownstreamStack((Layer(np.ones((2, 3)), np.zeros(3), TANH), Layer(np.ones((2, 2)), np.zeros(2), SIG)),
                            LossModel.log(2))

    def test_output_mismatch(self):
        with pytest.raises(ValueError):
            DownstreamStack((Layer(np.ones((2, 3)), np.zeros(3), SIG),), LossModel.log(2))

    @pytest.mark.parametrize("base_kind", ["log", "l2"])
    def test_gradient_fd(self, base_kind):
        rng = np.random.default_rng(21)
        base = LossModel.log(3) if base_kind == "log" else LossModel.squared_error(rng.uniform(-0.8, 0.8, (4, 3)))
        acts = [TANH, Activation("softplus")] if base_kind == "log" else [SIG, TANH]
        stack = random_stack(21, [2, 3, 3], acts, base)
        model = LossModel.composite(stack)
        q = np.full(base.n_labels, 1.0 / base.n_labels)
        worst = 0.0
        for _ in range(50):
            a = rng.normal(size=2)
            g = expected_grad(model, q, a)
            fd = fd_gradient(lambda v: expected_loss(model, q, v), a)
            worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))
        assert worst <= 1e-5

    def test_kink_distance(self):
        stack = DownstreamStack((Layer(np.eye(2), np.zeros(2), Activation("leaky_relu")),), LossModel.squared_error(
            [[0.0, 1.0], [1.0, 0.0]]))
        assert stack.kink_distance([0.3, -0.2]) == pytest.approx(0.2)
        assert DownstreamStack((), LossModel.log(2)).kink_distance([0.5, 0.5]) == np.inf


class TestLayerTarget:
    def test_independent_columns_collapse(self):
        prob = random_problem(2, "log", 4, 3)
        j = prob.joint(0.0)
        stack = anchored_stack(2, [2, 3], [SIG], prob.model, prob.p_y)
        t = layer_target(j, stack, TANH)
        np.testing.assert_allclose(t.bayes_actions, t.bayes_marginal[:, None].repeat(4, 1), atol=1e-8)

    def test_affine_inversion_oracle(self):
        rng = np.random.default_rng(5)
        y = rng.uniform(-1, 1, (3, 2))
        prob = random_problem(5, "l2", 4, 3)
        j = prob.joint(0.1)
        w1, b1 = rng.normal(size=(2, 2)) + 2 * np.eye(2), rng.normal(size=2)
        w2, b2 = rng.normal(size=(2, 2)) + 2 * np.eye(2), rng.normal(size=2)
        stack = DownstreamStack((Layer(w1, b1, IDENT), Layer(w2, b2, IDENT)), LossModel.squared_error(y))
        t = layer_target(j, stack, IDENT)
        # composed map a -> w2^T (w1^T a + b1) + b2; invert it at E[Y | x]
        comp = w2.T @ w1.T
        offset = w2.T @ b1 + b2
        oracle = np.linalg.solve(comp, (j.p_y_given_x @ y - offset).T)
        np.testing.assert_allclose(t.bayes_actions, oracle, atol=1e-8)

    def test_solutions_are_certified(self):
        prob = random_problem(4, "log", 4, 3)
        stack = anchored_stack(4, [2, 3], [SIG], prob.model, prob.p_y)
        t = layer_target(prob.joint(0.1), stack, TANH)
        assert all(s.gradient_norm <= 1e-9 for s in t.solutions)
        assert assert_invariants(t.bundle, 1e-8)["b_tilde_null"] <= 1e-8

    def test_hessian_symmetric_psd(self):
        prob = random_problem(4, "log", 4, 3)
        stack = anchored_stack(4, [2, 3], [SIG], prob.model, prob.p_y)
        t = layer_target(prob.joint(0.1), stack, TANH)
        h = hessian_ml(LossModel.composite(stack), prob.joint(0.1).p_y)
        np.testing.assert_allclose(h, h.T, atol=1e-6)
        assert np.linalg.eigvalsh(t.bundle.m_l).min() >= -1e-8

    def test_parallel_matches_serial(self):
        prob = random_problem(6, "log", 5, 3)
        stack = anchored_stack(6, [2, 3], [SIG], prob.model, prob.p_y)
        j = prob.joint(0.1)
        a = layer_target(j, stack, TANH, solver=SolverConfig(workers=1))
        b = layer_target(j, stack, TANH, solver=SolverConfig(workers=3))
        np.testing.assert_array_equal(a.bayes_actions, b.bayes_actions)

    def test_nonconvergence_names_column(self):
        prob = random_problem(6, "log", 4, 3)
        stack = anchored_stack(6, [2, 3], [SIG], prob.model, prob.p_y)
        with pytest.raises(NonConvergence, match="column"):
            layer_target(prob.joint(0.1), stack, TANH, solver=SolverConfig(tol=1e-30, max_iter=3))

    def test_leaky_marginal_nudged_off_kink(self):
        prob = random_problem(8, "l2", 4, 3)
        p_y = prob.p_y
        y = np.array([[1.0, 0.3], [-0.5, -0.2], [0.0, 0.4]])
        y[:, 0] -= y[:, 0] @ p_y  # first coordinate of E[Y] is exactly on the kink
        stack = DownstreamStack((Layer(np.eye(2), np.zeros(2), Activation("leaky_relu", 0.1)),),
                                LossModel.squared_error(y))
        t = layer_target(prob.joint(0.05), stack, IDENT)
        assert stack.kink_distance(t.bayes_marginal) >= 1e-8
        assert abs(t.bayes_marginal[0]) <= 1e-7

    def test_rank_precondition(self):
        prob = random_problem(4, "log", 4, 3)
        stack = anchored_stack(4, [2, 3], [SIG], prob.model, prob.p_y)
        t = layer_target(prob.joint(0.1), stack, TANH)
        with pytest.raises(RankTooLarge):
            solve_hidden_layer(t, 3)


class TestSweep:
    def test_one_hidden_gives_two_steps(self):
        prob = random_problem(3, "log", 4, 3)
        net = warm_net(prob, [2], [TANH])
        out = backward_sweep(prob.joint(0.1), net, prob.model)
        assert len(out) == 2

    def test_default_ranks(self):
        net = init_network(5, [4, 2], 3, [TANH, TANH], SIG, seed=0)
        assert default_ranks(net) == [2, 2, 4]

    def test_independent_sweep_is_trivial(self):
        prob = random_problem(3, "log", 4, 3)
        net = warm_net(prob, [3, 2], [TANH, TANH])
        for step in backward_steps(prob.joint(0.0), net, prob.model):
            assert step.analysis.singular_values[0] == pytest.approx(0.0, abs=1e-8)

    @settings(max_examples=6, deadline=None)
    @given(st.integers(0, 10**4), st.sampled_from(["log", "l2"]))
    def test_lowrank_invariants_on_every_layer(self, seed, kind):
        prob = random_problem(seed, kind, 4, 3)
        j = prob.joint(0.05)
        net = ideal_network(j, prob.model, [2, 2], [TANH, SIG], prob.activation).net
        for step in backward_steps(j, net, prob.model):
            b, an = step.bundle, step.analysis
            assert np.linalg.norm(b.b_tilde_mat @ b.sqrt_px) <= 1e-8
            assert an.achieved_frobenius == pytest.approx(an.ey_bound, abs=1e-10)
            assert np.all(np.diff(padded_singular_values(b)) <= 1e-15)
            np.testing.assert_allclose(an.xi_f_star @ b.sqrt_px, 0.0, atol=1e-8)


class TestIdealNetwork:
    def test_tabular_layer_reproduces_features(self):
        feats = np.array([[0.2, 0.7, 0.4], [0.6, 0.3, 0.5]])
        layer = tabular_layer(feats, SIG)
        np.testing.assert_allclose(layer.apply(np.eye(3)), feats, atol=1e-14)

    @pytest.mark.parametrize("kind", ["log", "l2"])
    def test_two_hidden_layers(self, kind):
        prob = random_problem(3, kind, 5, 4)
        j = prob.joint(0.05)
        ideal = ideal_network(j, prob.model, [2, 2], [TANH, SIG], prob.activation)
        assert ideal.net.widths == [5, 2, 2, prob.model.n]
        # the innermost layer is realised as a table, so only layers 3 and 2 are analysed
        assert len(ideal.analyses) == 2 and len(ideal.targets) == 1
        angle = correspondence_angle(ideal.targets[0], ideal.analyses[0])
        assert 0.0 <= angle <= 5.0

    def test_output_features_realised(self):
        prob = random_problem(3, "log", 5, 4)
        j = prob.joint(0.05)
        ideal = ideal_network(j, prob.model, [2], [TANH], prob.activation)
        feats, _ = forward_all(ideal.net)
        an = ideal.analyses[0]
        expected = np.tanh(0.0) + an.xi_f_star / ideal.output_bundle.sqrt_px
        np.testing.assert_allclose(feats[1], expected, atol=1e-12)

    def test_angle_shrinks_with_eps(self):
        prob = random_problem(3, "log", 5, 4)
        angles = []
        for eps in (0.1, 0.05, 0.025):
            ideal = ideal_network(prob.joint(eps), prob.model, [2, 2], [TANH, SIG], prob.activation)
            angles.append(correspondence_angle(ideal.targets[0], ideal.analyses[0]))
        assert angles[0] > angles[1] > angles[2]
