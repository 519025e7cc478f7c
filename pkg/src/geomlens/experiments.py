"""Experiment configuration, the epsilon sweep and the train-versus-theory comparison.

Everything here is orchestration over the numerical modules; the CLI is a thin
layer on top that handles files, flags and exit codes.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles

from . import __version__, serialize
from .activations import Activation, parse_activation
from .dist import (JointDistribution, PerturbationDirection, _check_marginal, chi2_mutual_information,
                   make_direction, max_eps)
from .errors import ConfigError, EpsilonTooLarge, InvalidDistribution, RankTooLarge
from .geometry import (assert_invariants, build_bundle, bundle_to_dict, feature_matrix, surrogate_objective,
                       true_objective)
from .instances import Problem, unit_directions
from .layerwise import backward_steps, ideal_network
from .losses import LossModel, bayes_action, hessian_ml, parse_loss
from .lowrank import feature_table, solve_layer, truncated_svd
from .netlab import (NetworkParams, TrainConfig, empirical_risk, excess_risk, forward_all, init_network,
                     lower_bound, train)

SWEEP_EPS = (0.2, 0.1, 0.05, 0.025)
CSV_HEADER = "# geomlens-sweep v1"
CSV_COLUMNS = (
    "eps", "chi2", "true_objective", "surrogate_total", "frobenius_term", "eta_term", "residual",
    "ey_bound", "trained_excess", "local_max_deviation", "bayes_deviation", "hessian_deviation",
)
DEFAULT_TOLERANCES = {
    "residual_slope_min": 2.5,
    "bayes_ratio": [0.4, 0.6],
    "local_ratio": [0.35, 0.65],
    "hessian_ratio_max": 0.6,
    "train_ratio": [0.5, 2.0],
    "decomposition": 1e-12,
    "invariant": 1e-10,
    "hidden_invariant": 1e-8,
}
DEFAULT_TRAIN = {"lr": 1.0, "steps": 5000, "warm_start": True}
SEED_ENV = "GEOMLENS_SEED"
# below this, ey_bound / 2 is rounding noise from the recomputed marginals and
# the excess-risk ratio is undefined
RATIO_FLOOR = 1e-12


@dataclass(frozen=True)
class ExperimentConfig:
    problem: Problem
    hidden_activations: tuple
    widths: tuple
    eps: float
    sweep_eps: tuple
    ranks: tuple | None
    tolerances: dict
    train: TrainConfig
    warm_start: bool
    workers: int
    seed: int
    local_rank: int | None
    effective: dict  # the validated config as plain data; hashed into reports

    @property
    def model(self) -> LossModel:
        return self.problem.model

    @property
    def output_activation(self) -> Activation:
        return self.problem.activation

    @property
    def config_hash(self) -> str:
        text = json.dumps(serialize.to_plain(self.effective), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def joint(self, eps: float | None = None) -> JointDistribution:
        return self.problem.joint(self.eps if eps is None else eps)

    def metadata(self) -> dict:
        return {"version": __version__, "seed": self.seed, "config_hash": self.config_hash}


def apply_overrides(raw: dict, eps=None, seed=None, rank=None, environ=None) -> dict:
    """Precedence, lowest first: file, ``GEOMLENS_SEED``, command-line flags."""
    cfg = copy.deepcopy(raw)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        try:
            cfg["seed"] = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from exc
    if seed is not None:
        cfg["seed"] = int(seed)
    if eps is not None:
        eps = [float(e) for e in eps]
        cfg["eps"] = eps[0]
        cfg.setdefault("sweep", {})["eps"] = eps
    if rank is not None:
        ranks = list(cfg.get("ranks") or [])
        widths = cfg.get("problem", {}).get("widths", [])
        if not ranks:
            ranks = [None] * (len(widths) + 1)
        ranks[0] = int(rank)
        cfg["ranks"] = ranks
    return cfg


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"missing '{key}' in {where}")
    return d[key]


def _direction(entry, p_x, p_y, seed: int) -> PerturbationDirection:
    entry = entry or {}
    if "phi" in entry:
        return make_direction(p_x, p_y, raw=np.asarray(entry["phi"], dtype=float))
    return make_direction(p_x, p_y, seed=int(entry.get("seed", seed)))


def validate(raw: dict) -> ExperimentConfig:
    """Check every precondition before any heavy computation.

    Raises ``ConfigError`` for malformed input and the numerical module's own
    error (``EpsilonTooLarge``, ``RankTooLarge``, ``OutOfImage``) when a value
    is well formed but outside the admissible range.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    prob = _require(raw, "problem", "config")
    seed = int(raw.get("seed", 0))
    try:
        p_x = _check_marginal(np.asarray(_require(prob, "p_x", "problem"), dtype=float), "p_x")
        p_y = _check_marginal(np.asarray(_require(prob, "p_y", "problem"), dtype=float), "p_y")
        direction = _direction(prob.get("direction"), p_x, p_y, seed)
    except (InvalidDistribution, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    loss_name = prob.get("loss", "log")
    try:
        model = parse_loss(loss_name, n_labels=p_y.size, y_values=prob.get("y_values"))
        out_act = parse_activation(prob.get("output_activation", "sigmoid" if loss_name == "log" else "identity"))
        hidden_acts = tuple(parse_activation(a) for a in prob.get("hidden_activations", ["identity"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if model.kind == "l2" and model.y_values.shape[0] != p_y.size:
        raise ConfigError(f"y_values has {model.y_values.shape[0]} rows, expected |Y| = {p_y.size}")
    widths = tuple(int(w) for w in prob.get("widths", [1]))
    if len(widths) != len(hidden_acts) or not widths or min(widths) < 1:
        raise ConfigError("need one positive width per hidden activation and at least one hidden layer")
    nx, n = p_x.size, model.n
    if widths[-1] > min(n, nx):
        raise RankTooLarge(f"last hidden width {widths[-1]} exceeds min(n, |X|) = {min(n, nx)}")
    for i in range(1, len(widths)):
        if widths[i - 1] > min(widths[i], nx):
            raise RankTooLarge(f"width {widths[i - 1]} of layer {i} exceeds min(k_{i + 1}, |X|)")

    problem = Problem(p_x, p_y, direction, model, out_act)
    bound = max_eps(direction)
    eps = float(raw.get("eps", 0.05))
    sweep = raw.get("sweep", {}) or {}
    sweep_eps = tuple(sorted({float(e) for e in sweep.get("eps", SWEEP_EPS)}, reverse=True))
    if not sweep_eps:
        raise ConfigError("sweep needs at least one eps")
    for e in (eps,) + sweep_eps:
        if not 0 <= e < bound:
            raise EpsilonTooLarge(f"eps={e:g} outside [0, {bound:.6g}) for this direction")

    ranks = raw.get("ranks")
    if ranks is not None:
        dims = [nx] + list(widths) + [n]
        caps = [min(dims[-2], n, nx)] + [min(dims[i - 1], dims[i], nx) for i in range(len(widths), 0, -1)]
        if len(ranks) != len(widths) + 1:
            raise ConfigError(f"ranks needs {len(widths) + 1} entries (output layer first)")
        ranks = tuple(cap if r is None else int(r) for r, cap in zip(ranks, caps))
        for r, cap in zip(ranks, caps):
            if not 1 <= r <= cap:
                raise RankTooLarge(f"rank {r} outside [1, {cap}]")

    # the output activation must be able to reproduce the marginal Bayes action
    out_act.inverse(bayes_action(model, p_y).action)

    tolerances = dict(DEFAULT_TOLERANCES)
    tolerances.update(raw.get("tolerances", {}) or {})
    tcfg = dict(DEFAULT_TRAIN)
    tcfg.update(raw.get("train", {}) or {})
    train_cfg = TrainConfig(lr=float(tcfg["lr"]), steps=int(tcfg["steps"]), seed=seed)
    if train_cfg.lr < 0 or train_cfg.steps < 0:
        raise ConfigError("train.lr and train.steps must be non-negative")
    workers = int(sweep.get("workers", 1))
    local = sweep.get("local_rank")
    if local is not None and not 1 <= int(local) <= min(n, nx):
        raise RankTooLarge(f"local_rank {local} outside [1, {min(n, nx)}]")
    local = None if local is None else int(local)

    effective = {
        "problem": {
            "p_x": p_x, "p_y": p_y, "direction_phi": direction.phi, "loss": model.kind,
            "y_values": model.y_values, "output_activation": out_act.name,
            "hidden_activations": [a.name for a in hidden_acts], "widths": list(widths),
        },
        "eps": eps, "sweep_eps": list(sweep_eps), "local_rank": local,
        "ranks": None if ranks is None else list(ranks),
        "tolerances": tolerances, "train": {"lr": train_cfg.lr, "steps": train_cfg.steps,
                                            "warm_start": bool(tcfg["warm_start"])},
        "seed": seed,
    }
    return ExperimentConfig(problem, hidden_acts, widths, eps, sweep_eps, ranks, tolerances, train_cfg,
                            bool(tcfg["warm_start"]), workers, seed, local, effective)


def load_config(path, eps=None, seed=None, rank=None, environ=None) -> ExperimentConfig:
    try:
        raw = serialize.load(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return validate(apply_overrides(raw, eps=eps, seed=seed, rank=rank, environ=environ))


# ---------------------------------------------------------------- analysis


def analyze(cfg: ExperimentConfig, j: JointDistribution, net: NetworkParams | None = None) -> dict:
    """Per-layer bundles and closed-form analyses, output layer first.

    Without ``net`` the analysed network is the one assembled from the
    closed-form optima themselves.
    """
    if j.shape != (cfg.problem.p_x.size, cfg.problem.p_y.size):
        raise ConfigError(f"distribution shape {j.shape} does not match the config")
    if net is None:
        net = ideal_network(j, cfg.model, cfg.widths, cfg.hidden_activations, cfg.output_activation).net
    steps = backward_steps(j, net, cfg.model, ranks=cfg.ranks)
    layers = []
    for idx, step in enumerate(steps):
        tol = cfg.tolerances["invariant"] if idx == 0 else cfg.tolerances["hidden_invariant"]
        residuals = assert_invariants(step.bundle, tol)
        layers.append({
            "layer": step.layer,
            "invariants": residuals,
            "bundle": bundle_to_dict(step.bundle),
            "analysis": step.analysis.to_dict(),
        })
    return {"metadata": cfg.metadata(), "chi2": chi2_mutual_information(j), "distribution": j.to_dict(),
            "layers": layers}


# ---------------------------------------------------------------- sweep


def analysis_point(bundle, k: int, seed: int, eps: float, mu_level: float = 1.0):
    """Closed-form optimum moved by ``eps`` along fixed random directions.

    The result sits inside the local regime (pre-activations within O(eps) of
    the reference bias) without being the exact optimum.
    """
    mu = np.full(k, mu_level)
    an = solve_layer(bundle, k, mu_f=mu, gauge="unit_weight")
    f = feature_table(bundle, an.xi_f_star, mu)
    dw, db, df = unit_directions(seed, an.w_star.shape, (bundle.n,), f.shape)
    return an.w_star + eps * dw, an.bias_star + eps * db, f + eps * df


def free_feature_fit(j: JointDistribution, model: LossModel, act: Activation, b_tilde, k: int, eps: float,
                     cfg: TrainConfig, warm: bool = True):
    """Train a tabular feature map plus output layer; return the net and max pre-activation deviation."""
    net = init_network(j.shape[0], [k], model.n, [Activation("identity")], act, seed=cfg.seed,
                       warm_bias=b_tilde if warm else None, warm_scale=eps if warm else None)
    result = train(net, j, model, cfg)
    feats, _ = forward_all(result.net)
    out = result.net.output
    z = out.weight.T @ feats[-1] + out.bias[:, None]
    return result, float(np.abs(z - np.asarray(b_tilde)[:, None]).max())


def local_rank(cfg: ExperimentConfig, bundle) -> int:
    """Feature width of the free-feature fit.

    Defaults to the smallest width that can reproduce every centred Bayes
    action, so the fitted net can actually reach the local optimum.
    """
    if cfg.local_rank is not None:
        return cfg.local_rank
    return max(1, min(bundle.rank_ml, bundle.n_inputs - 1))


def sweep_level(cfg: ExperimentConfig, eps: float) -> dict:
    j = cfg.joint(eps)
    model, act = cfg.model, cfg.output_activation
    bundle = build_bundle(j, model, act)
    assert_invariants(bundle, cfg.tolerances["invariant"])
    k = cfg.ranks[0] if cfg.ranks else min(cfg.widths[-1], bundle.n, bundle.n_inputs)
    w, b, f = analysis_point(bundle, k, cfg.seed, eps)
    truth = true_objective(j, model, act, f, w, b, cond_risks=bundle.cond_risks)
    total, frob, eta_term = surrogate_objective(bundle, w, b, f)
    layer = solve_layer(bundle, k)
    m_marg = bundle.m_l
    hess_dev = max(float(np.linalg.norm(hessian_ml(model, q) - m_marg)) for q in j.p_y_given_x)
    bayes_dev = float(np.max(np.linalg.norm(bundle.bayes_actions - bundle.a_py[:, None], axis=0)))
    trained, local_dev = free_feature_fit(j, model, act, bundle.b_tilde_vec, local_rank(cfg, bundle), eps,
                                          cfg.train)
    ideal = ideal_network(j, model, cfg.widths, cfg.hidden_activations, act)
    steps = backward_steps(j, ideal.net, model, ranks=cfg.ranks)
    return {
        "eps": eps,
        "chi2": chi2_mutual_information(j),
        "true_objective": truth,
        "surrogate_total": total,
        "frobenius_term": frob,
        "eta_term": eta_term,
        "residual": abs(truth - total),
        "ey_bound": layer.ey_bound,
        "trained_excess": excess_risk(trained.net, j, model),
        "local_max_deviation": local_dev,
        "bayes_deviation": bayes_dev,
        "hessian_deviation": hess_dev,
        "singular_values": layer.singular_values,
        "layer_singular_values": [s.analysis.singular_values for s in steps],
    }


def loglog_slope(eps, values) -> float | None:
    eps, values = np.asarray(eps, dtype=float), np.asarray(values, dtype=float)
    if eps.size < 2 or np.any(values <= 0):
        return None
    return float(np.polyfit(np.log(eps), np.log(values), 1)[0])


def consecutive_ratios(values) -> list[float | None]:
    """Ratios ``v[i+1] / v[i]``. A deviation that is exactly zero at both levels
    (the squared-error Hessian, say) gives 0; growth away from zero gives ``None``."""
    v = np.asarray(values, dtype=float)
    out = []
    for a, b in zip(v, v[1:]):
        if a == 0:
            out.append(0.0 if b == 0 else None)
        else:
            out.append(float(b / a))
    return out


def _in_band(values, band) -> bool:
    return all(v is not None and band[0] <= v <= band[1] for v in values)


def run_sweep(cfg: ExperimentConfig) -> dict:
    """All sweep levels plus fitted slopes and gate verdicts.

    With a single level no slope or ratio exists; those fields are ``None`` and
    no gate is evaluated.
    """
    levels = list(cfg.sweep_eps)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(lambda e: sweep_level(cfg, e), levels))
    else:
        rows = [sweep_level(cfg, e) for e in levels]
    rows.sort(key=lambda r: -r["eps"])
    tol = cfg.tolerances
    eps = [r["eps"] for r in rows]
    slopes = {"residual": None, "bayes_ratios": None, "local_ratios": None, "hessian_ratios": None}
    gates = {}
    if len(rows) >= 2:
        slopes = {
            "residual": loglog_slope(eps, [r["residual"] for r in rows]),
            "bayes_ratios": consecutive_ratios([r["bayes_deviation"] for r in rows]),
            "local_ratios": consecutive_ratios([r["local_max_deviation"] for r in rows]),
            "hessian_ratios": consecutive_ratios([r["hessian_deviation"] for r in rows]),
        }
        gates = {
            "residual_slope": slopes["residual"] is not None and slopes["residual"] >= tol["residual_slope_min"],
            "bayes_ratio": _in_band(slopes["bayes_ratios"], tol["bayes_ratio"]),
            "local_ratio": _in_band(slopes["local_ratios"], tol["local_ratio"]),
            "hessian_ratio": all(v is not None and v <= tol["hessian_ratio_max"] for v in slopes["hessian_ratios"]),
        }
    return {"metadata": cfg.metadata(), "rows": rows, "slopes": slopes, "gates": gates,
            "passed": all(gates.values())}


def sweep_csv(report: dict) -> str:
    rows = report["rows"]
    n_sigma = max((len(r["singular_values"]) for r in rows), default=0)
    cols = list(CSV_COLUMNS) + [f"sigma_{i + 1}" for i in range(n_sigma)]
    lines = [CSV_HEADER, ",".join(cols)]
    for r in rows:
        vals = [serialize.format_float(r[c]) for c in CSV_COLUMNS]
        vals += [serialize.format_float(s) for s in r["singular_values"]]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- train-compare


def train_compare(cfg: ExperimentConfig) -> dict:
    """Train the configured net and compare it with the rank-k prediction.

    The band on (excess risk) / (ey_bound / 2) is only a gate for warm starts;
    cold starts may land in other local optima and are reported as is.
    """
    eps = cfg.eps
    j = cfg.joint(eps)
    model, act = cfg.model, cfg.output_activation
    bundle = build_bundle(j, model, act)
    k = cfg.ranks[0] if cfg.ranks else min(cfg.widths[-1], bundle.n, bundle.n_inputs)
    layer = solve_layer(bundle, k)
    floor = lower_bound(j, model)
    warm = cfg.warm_start
    net = init_network(j.shape[0], cfg.widths, model.n, cfg.hidden_activations, act, seed=cfg.seed,
                       warm_bias=bundle.b_tilde_vec if warm else None, warm_scale=eps if warm else None)
    worst = [0.0]

    def check(net_now, risk):
        feats, _ = forward_all(net_now)
        out = net_now.output
        gap = true_objective(j, model, act, feats[-1], out.weight, out.bias, cond_risks=bundle.cond_risks)
        worst[0] = max(worst[0], abs(risk - (floor + gap)))

    check(net, empirical_risk(net, j, model))
    result = train(net, j, model, cfg.train, callback=lambda step, n_, r: check(n_, r))
    excess = result.trace[-1] - floor
    half_bound = 0.5 * layer.ey_bound
    ratio = excess / half_bound if half_bound > RATIO_FLOOR else None
    feats, _ = forward_all(result.net)
    xi_f, _ = feature_matrix(j.p_x, feats[-1])
    angles = None
    m = min(k, bundle.b_tilde_mat.shape[0], bundle.n_inputs)
    if layer.singular_values[0] > 0 and np.linalg.matrix_rank(xi_f) > 0 and m > 0:
        _, _, v = truncated_svd(bundle.b_tilde_mat, m)
        angles = np.degrees(subspace_angles(xi_f.T, v)).tolist()
    band = cfg.tolerances["train_ratio"]
    gates = {"decomposition": worst[0] <= cfg.tolerances["decomposition"]}
    if warm:
        gates["ratio"] = (band[0] <= ratio <= band[1]) if ratio is not None else excess <= 1e-10
    return {
        "metadata": cfg.metadata(),
        "eps": eps,
        "warm_start": warm,
        "rank_k": k,
        "lower_bound": floor,
        "excess_risk": excess,
        "ey_bound": layer.ey_bound,
        "ratio": ratio,
        "principal_angles_deg": angles,
        "decomposition_max_error": worst[0],
        "steps_taken": result.steps_taken,
        "risk_trace_head": result.trace[:5],
        "risk_trace_tail": result.trace[-5:],
        "gates": gates,
        "passed": all(gates.values()),
    }
