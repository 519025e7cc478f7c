"""Reference feedforward network on one-hot inputs, exact risk and a full-batch trainer."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import serialize
from .activations import Activation, parse_activation
from .dist import JointDistribution, make_rng
from .errors import Divergence, InadmissibleAction
from .losses import LossModel, bayes_action, expected_grad, expected_loss

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # k_in x k_out
    bias: np.ndarray  # k_out
    activation: Activation

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weight, dtype=float))
        b = np.asarray(self.bias, dtype=float).reshape(-1)
        if w.shape[1] != b.size:
            raise ValueError(f"weight {w.shape} does not match bias of length {b.size}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def apply(self, f):
        """Map a ``k_in x |X|`` table (or a vector) to the next layer."""
        f = np.asarray(f, dtype=float)
        z = self.weight.T @ f + (self.bias[:, None] if f.ndim == 2 else self.bias)
        return self.activation.eval(z)


@dataclass(frozen=True)
class NetworkParams:
    n_inputs: int
    hidden: tuple = field(default=())
    output: Layer = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        width = self.n_inputs
        for i, layer in enumerate(self.layers):
            if layer.shape[0] != width:
                raise ValueError(f"layer {i + 1} expects input width {layer.shape[0]}, got {width}")
            width = layer.shape[1]

    @property
    def layers(self) -> tuple:
        return self.hidden + (self.output,)

    @property
    def widths(self) -> list[int]:
        return [self.n_inputs] + [layer.shape[1] for layer in self.layers]

    def with_layers(self, layers) -> "NetworkParams":
        layers = tuple(layers)
        return replace(self, hidden=layers[:-1], output=layers[-1])


def one_hot(n_inputs: int, x: int | None = None) -> np.ndarray:
    if x is None:
        return np.eye(n_inputs)
    e = np.zeros(n_inputs)
    e[x] = 1.0
    return e


def forward(net: NetworkParams, x: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Features of every layer (input one-hot first) and the action at one input."""
    feats = [one_hot(net.n_inputs, x)]
    for layer in net.hidden:
        feats.append(layer.apply(feats[-1]))
    return feats, net.output.apply(feats[-1])


def forward_all(net: NetworkParams) -> tuple[list[np.ndarray], np.ndarray]:
    """Tables ``k_i x |X|`` for every layer, and the ``n x |X|`` action table."""
    feats = [one_hot(net.n_inputs)]
    for layer in net.hidden:
        feats.append(layer.apply(feats[-1]))
    return feats, net.output.apply(feats[-1])


def empirical_risk(net: NetworkParams, j: JointDistribution, model: LossModel) -> float:
    _, actions = forward_all(net)
    return float(sum(j.p_x[x] * expected_loss(model, q, actions[:, x]) for x, q in enumerate(j.p_y_given_x)))


def lower_bound(j: JointDistribution, model: LossModel) -> float:
    """Risk of the Bayes map ``x -> a_{P(.|x)}``; no network does better."""
    return float(sum(j.p_x[x] * bayes_action(model, q).risk for x, q in enumerate(j.p_y_given_x)))


def excess_risk(net: NetworkParams, j: JointDistribution, model: LossModel, floor: float | None = None) -> float:
    if floor is None:
        floor = lower_bound(j, model)
    return empirical_risk(net, j, model) - floor


def gradients(net: NetworkParams, j: JointDistribution, model: LossModel) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Risk and its gradient with respect to every ``(weight, bias)`` by backpropagation."""
    feats = [one_hot(net.n_inputs)]
    pre = []
    for layer in net.layers:
        z = layer.weight.T @ feats[-1] + layer.bias[:, None]
        pre.append(z)
        feats.append(layer.activation.eval(z))
    actions = feats[-1]
    risk = 0.0
    g = np.empty_like(actions)
    for x, q in enumerate(j.p_y_given_x):
        risk += j.p_x[x] * expected_loss(model, q, actions[:, x])
        g[:, x] = j.p_x[x] * expected_grad(model, q, actions[:, x])
    grads = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        gz = g * layer.activation.deriv(pre[i])
        grads.append((feats[i] @ gz.T, gz.sum(axis=1)))
        g = layer.weight @ gz
    return float(risk), grads[::-1]


def flatten(net: NetworkParams) -> np.ndarray:
    return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in net.layers])


def unflatten(net: NetworkParams, vec) -> NetworkParams:
    vec = np.asarray(vec, dtype=float)
    layers, pos = [], 0
    for layer in net.layers:
        kin, kout = layer.shape
        w = vec[pos:pos + kin * kout].reshape(kin, kout)
        pos += kin * kout
        b = vec[pos:pos + kout]
        pos += kout
        layers.append(Layer(w, b, layer.activation))
    return net.with_layers(layers)


def flat_gradient(net: NetworkParams, j: JointDistribution, model: LossModel) -> tuple[float, np.ndarray]:
    risk, grads = gradients(net, j, model)
    return risk, np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def init_network(n_inputs: int, widths, n_out: int, hidden_acts, out_act: Activation, seed: int,
                 warm_bias=None, warm_scale: float | None = None) -> NetworkParams:
    """Uniform ``[-s, s]`` weights with ``s = 1/sqrt(fan_in)``, zero biases.

    With ``warm_bias`` the output bias starts there and the output weights are
    drawn at scale ``warm_scale``, so the net starts near the constant Bayes map.
    """
    rng = make_rng(seed)
    dims = [n_inputs] + list(widths)
    hidden_acts = list(hidden_acts)
    if len(hidden_acts) != len(widths):
        raise ValueError("need one activation per hidden layer")
    hidden = []
    for i, act in enumerate(hidden_acts):
        s = 1.0 / np.sqrt(dims[i])
        hidden.append(Layer(rng.uniform(-s, s, (dims[i], dims[i + 1])), np.zeros(dims[i + 1]), act))
    s = 1.0 / np.sqrt(dims[-1])
    w = rng.uniform(-s, s, (dims[-1], n_out))
    b = np.zeros(n_out)
    if warm_bias is not None:
        b = np.asarray(warm_bias, dtype=float).copy()
        if warm_scale is not None:
            w = w * (warm_scale / s)
    return NetworkParams(n_inputs, tuple(hidden), Layer(w, b, out_act))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.5
    steps: int = 1000
    seed: int = 0  # consumed by init_network; the trainer itself is deterministic
    grow: float = 1.2
    min_step: float = 1e-14
    gtol: float = 0.0


@dataclass(frozen=True)
class TrainResult:
    net: NetworkParams
    trace: np.ndarray
    steps_taken: int
    final_step: float


def _risk_or_inf(net, j, model):
    try:
        return empirical_risk(net, j, model)
    except InadmissibleAction:
        return np.inf


def train(net: NetworkParams, j: JointDistribution, model: LossModel, cfg: TrainConfig, callback=None) -> TrainResult:
    """Full-batch gradient descent with backtracking.

    A step is kept only if the risk does not increase, so the trace is monotone
    and the divergence limit can only be hit by the starting point.
    After an accepted step the step size grows by ``cfg.grow``; it halves on
    rejection. Training stops early when the step size underflows ``min_step``.
    """
    theta = flatten(net)
    risk, g = flat_gradient(net, j, model)
    if not risk <= DIVERGENCE_LIMIT:
        raise Divergence(f"initial risk {risk:.3e} exceeds {DIVERGENCE_LIMIT:g}")
    trace = [risk]
    t = float(cfg.lr)
    steps = 0
    if t > 0:
        for steps in range(1, cfg.steps + 1):
            if cfg.gtol and np.linalg.norm(g) <= cfg.gtol:
                break
            while True:
                cand_theta = theta - t * g
                cand = unflatten(net, cand_theta)
                r_new = _risk_or_inf(cand, j, model)
                if r_new <= risk:
                    break
                t *= 0.5
                if t < cfg.min_step:
                    break
            if t < cfg.min_step:
                trace.append(risk)
                break
            theta, net = cand_theta, cand
            risk, g = flat_gradient(net, j, model)
            if risk > DIVERGENCE_LIMIT:
                raise Divergence(f"risk {risk:.3e} exceeded {DIVERGENCE_LIMIT:g} at step {steps}")
            trace.append(risk)
            if callback is not None:
                callback(steps, net, risk)
            t *= cfg.grow
    else:
        trace.extend([risk] * cfg.steps)
        steps = cfg.steps
    return TrainResult(net, np.asarray(trace), steps, t)


def net_to_dict(net: NetworkParams) -> dict:
    return {
        "n_inputs": net.n_inputs,
        "layers": [
            {
                "shape": list(layer.shape),
                "weight": layer.weight,
                "bias": layer.bias,
                "activation": layer.activation.name,
            }
            for layer in net.layers
        ],
    }


def net_from_dict(d: dict) -> NetworkParams:
    layers = []
    for entry in d["layers"]:
        w = np.asarray(entry["weight"], dtype=float).reshape(entry["shape"])
        layers.append(Layer(w, np.asarray(entry["bias"], dtype=float), parse_activation(entry["activation"])))
    return NetworkParams(int(d["n_inputs"]), tuple(layers[:-1]), layers[-1])


def save_net(net: NetworkParams, path) -> None:
    serialize.dump(net_to_dict(net), path)


def load_net(path) -> NetworkParams:
    return net_from_dict(serialize.load(path))
