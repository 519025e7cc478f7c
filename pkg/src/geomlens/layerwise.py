"""Hidden-layer recursion: composite losses, per-layer targets and the backward sweep.

Layer ``i`` is analysed with every downstream layer frozen. Its loss is the
base loss composed with the downstream maps, so its Bayes actions play the role
the label distribution plays for the output layer.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles

from .activations import Activation
from .dist import JointDistribution
from .errors import NonConvergence, RankTooLarge
from .geometry import GeometryBundle, build_bundle, bundle_from_actions
from .losses import BayesSolution, LossModel, bayes_action, hessian_ml, loss
from .lowrank import LayerAnalysis, feature_table, solve_layer
from .netlab import Layer, NetworkParams, forward_all

KINK_MARGIN = 1e-8
BAYES_GRAD_MAX = 1e-9


@dataclass(frozen=True)
class DownstreamStack:
    """Frozen layers ``i+1, ..., m`` and the output layer, followed by the base loss."""

    layers: tuple
    base: LossModel

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if self.base.kind == "composite":
            raise ValueError("the base loss of a stack must be log or l2")
        for upper, lower in zip(layers, layers[1:]):
            if upper.shape[1] != lower.shape[0]:
                raise ValueError(f"stack layers {upper.shape} and {lower.shape} do not chain")
        if layers and layers[-1].shape[1] != self.base.n:
            raise ValueError(f"stack outputs {layers[-1].shape[1]} values, loss expects {self.base.n}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[0] if self.layers else self.base.n

    def _preactivations(self, a):
        zs = []
        for layer in self.layers:
            z = layer.weight.T @ a + layer.bias
            zs.append(z)
            a = layer.activation.eval(z)
        return zs, a

    def forward(self, a) -> np.ndarray:
        return self._preactivations(np.asarray(a, dtype=float))[1]

    def pullback(self, a, g_out) -> np.ndarray:
        """Vector-Jacobian product of the stack at ``a`` applied to ``g_out``."""
        zs, _ = self._preactivations(np.asarray(a, dtype=float))
        g = np.asarray(g_out, dtype=float)
        for layer, z in zip(reversed(self.layers), reversed(zs)):
            g = layer.weight @ (g * layer.activation.deriv(z))
        return g

    def kink_distance(self, a) -> float:
        """Smallest |pre-activation| over leaky-ReLU layers; ``inf`` when there are none."""
        zs, _ = self._preactivations(np.asarray(a, dtype=float))
        dist = [np.abs(z).min() for layer, z in zip(self.layers, zs) if layer.activation.kind == "leaky_relu"]
        return float(min(dist)) if dist else np.inf


def composite_loss(stack: DownstreamStack, y: int, a) -> float:
    return loss(LossModel.composite(stack), y, a)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 100_000
    workers: int = 1


@dataclass(frozen=True)
class LayerTarget:
    bayes_actions: np.ndarray  # k_i x |X|
    bayes_marginal: np.ndarray
    b_tilde_i: np.ndarray
    bundle: GeometryBundle
    solutions: tuple = ()


def _off_kink(stack: DownstreamStack, sol: BayesSolution) -> BayesSolution:
    a = sol.action
    nudged = False
    for _ in range(10):
        if stack.kink_distance(a) >= KINK_MARGIN:
            break
        a = a + KINK_MARGIN
        nudged = True
    if not nudged:
        return sol
    return BayesSolution(a, sol.risk, sol.gradient_norm, sol.method, sol.iterations)


def layer_target(j: JointDistribution, stack: DownstreamStack, act: Activation, f=None,
                 solver: SolverConfig | None = None) -> LayerTarget:
    """Bayes actions of the composite loss for ``P_Y`` and every conditional.

    ``act`` is the activation of the layer being analysed; it fixes the bias
    that reproduces the marginal Bayes action. The marginal problem starts at
    ``act(0)``; each conditional starts from the marginal solution.
    """
    solver = solver or SolverConfig()
    model = LossModel.composite(stack)
    init = act.eval(np.zeros(stack.input_dim))
    marginal = bayes_action(model, j.p_y, init=init, tol=solver.tol, max_iter=solver.max_iter)
    marginal = _off_kink(stack, marginal)

    def solve(x):
        try:
            return bayes_action(model, j.p_y_given_x[x], init=marginal.action, tol=solver.tol,
                                max_iter=solver.max_iter)
        except NonConvergence as exc:
            raise NonConvergence(f"column {x}: {exc}") from exc

    xs = range(j.shape[0])
    if solver.workers > 1:
        with ThreadPoolExecutor(max_workers=solver.workers) as pool:
            conds = list(pool.map(solve, xs))
    else:
        conds = [solve(x) for x in xs]
    for x, sol in enumerate(conds):
        if sol.gradient_norm > BAYES_GRAD_MAX:
            raise NonConvergence(f"column {x}: gradient norm {sol.gradient_norm:.3e}")
    actions = np.column_stack([s.action for s in conds])
    m_l = hessian_ml(model, j.p_y, marginal)
    bundle = bundle_from_actions(j.p_x, actions, marginal.action, m_l, act, f=f,
                                 cond_risks=[s.risk for s in conds])
    return LayerTarget(actions, marginal.action, bundle.b_tilde_vec, bundle, tuple(conds))


def solve_hidden_layer(target: LayerTarget, k_prev: int, mu_f=None, gauge: str = "balanced",
                       width: int | None = None) -> LayerAnalysis:
    k_i = target.bayes_actions.shape[0]
    n_inputs = target.bayes_actions.shape[1]
    if not 1 <= k_prev <= min(k_i, n_inputs):
        raise RankTooLarge(f"previous width {k_prev} violates 1 <= k <= min({k_i}, {n_inputs})")
    return solve_layer(target.bundle, k_prev, mu_f=mu_f, gauge=gauge, width=width)


@dataclass(frozen=True)
class SweepStep:
    layer: int  # m + 1 for the output layer, then m, m - 1, ..., 1
    bundle: GeometryBundle
    analysis: LayerAnalysis


def default_ranks(net: NetworkParams) -> list[int]:
    """Output-first ranks ``min(k_in, k_out, |X|)`` for every layer."""
    widths = net.widths
    nx = net.n_inputs
    out = [min(widths[-2], widths[-1], nx)]
    for i in range(len(net.hidden), 0, -1):
        out.append(min(widths[i - 1], widths[i], nx))
    return out


def backward_steps(j: JointDistribution, net: NetworkParams, model: LossModel, ranks=None,
                   solver: SolverConfig | None = None, gauge: str = "balanced") -> list[SweepStep]:
    if net.n_inputs != j.shape[0]:
        raise ValueError(f"net has {net.n_inputs} inputs, distribution has {j.shape[0]}")
    ranks = default_ranks(net) if ranks is None else list(ranks)
    m = len(net.hidden)
    if len(ranks) != m + 1:
        raise ValueError(f"need {m + 1} ranks, got {len(ranks)}")
    feats, _ = forward_all(net)
    bundle = build_bundle(j, model, net.output.activation, f=feats[m])
    analysis = solve_layer(bundle, ranks[0], mu_f=bundle.mu_f, gauge=gauge, width=feats[m].shape[0])
    steps = [SweepStep(m + 1, bundle, analysis)]
    downstream = [net.output]
    for i in range(m, 0, -1):
        layer = net.hidden[i - 1]
        target = layer_target(j, DownstreamStack(tuple(downstream), model), layer.activation, f=feats[i - 1],
                              solver=solver)
        rank = ranks[m + 1 - i]
        analysis = solve_hidden_layer(target, rank, target.bundle.mu_f, gauge, width=feats[i - 1].shape[0])
        steps.append(SweepStep(i, target.bundle, analysis))
        downstream.insert(0, layer)
    return steps


def backward_sweep(j: JointDistribution, net: NetworkParams, model: LossModel, ranks=None,
                   solver: SolverConfig | None = None) -> list[LayerAnalysis]:
    """One analysis per layer, output layer first."""
    return [s.analysis for s in backward_steps(j, net, model, ranks, solver)]


def tabular_layer(features, act: Activation) -> Layer:
    """First layer on one-hot inputs that reproduces a ``k x |X|`` feature table exactly."""
    features = np.asarray(features, dtype=float)
    bias = act.inverse(features.mean(axis=1))
    return Layer(act.inverse(features).T - bias, bias, act)


@dataclass(frozen=True)
class IdealNetwork:
    net: NetworkParams
    analyses: tuple  # output first
    targets: tuple  # LayerTarget per hidden layer i >= 2, outermost first
    output_bundle: GeometryBundle


def ideal_network(j: JointDistribution, model: LossModel, widths, hidden_acts, out_act: Activation,
                  solver: SolverConfig | None = None) -> IdealNetwork:
    """Build a net layer by layer from the output inward using the closed-form optima.

    Each layer gets its rank-``k_{i-1}`` optimal weights and bias (features
    centred at ``h_{i-1}(0)``). The first layer then realises the requested
    features tabularly. Widths must satisfy ``k_{i-1} <= min(k_i, |X|)``.
    """
    widths = list(widths)
    hidden_acts = list(hidden_acts)
    if len(widths) != len(hidden_acts) or not widths:
        raise ValueError("need one activation per hidden width and at least one hidden layer")
    m = len(widths)
    out_bundle = build_bundle(j, model, out_act)
    mu = hidden_acts[-1].eval(np.zeros(widths[-1]))
    analysis = solve_layer(out_bundle, widths[-1], mu_f=mu, gauge="unit_weight")
    layers = [Layer(analysis.w_star, analysis.bias_star, out_act)]
    analyses = [analysis]
    targets = []
    features = feature_table(out_bundle, analysis.xi_f_star, mu)
    for i in range(m, 1, -1):
        stack = DownstreamStack(tuple(layers), model)
        target = layer_target(j, stack, hidden_acts[i - 1], solver=solver)
        mu = hidden_acts[i - 2].eval(np.zeros(widths[i - 2]))
        analysis = solve_hidden_layer(target, widths[i - 2], mu_f=mu, gauge="unit_weight")
        layers.insert(0, Layer(analysis.w_star, analysis.bias_star, hidden_acts[i - 1]))
        analyses.append(analysis)
        targets.append(target)
        features = feature_table(target.bundle, analysis.xi_f_star, mu)
    layers.insert(0, tabular_layer(features, hidden_acts[0]))
    net = NetworkParams(j.shape[0], tuple(layers[:-1]), layers[-1])
    return IdealNetwork(net, tuple(analyses), tuple(targets), out_bundle)


def correspondence_angle(target: LayerTarget, analysis: LayerAnalysis) -> float:
    """Largest principal angle (degrees) between the Bayes-action rows of a layer
    target and the optimal-feature rows predicted one layer further out."""
    angles = subspace_angles(target.bundle.b_mat.T, analysis.xi_f_star.T)
    return float(np.degrees(angles.max()))
