"""Command-line entry point: ``geomlens <subcommand> --config FILE [flags]``.

Exit codes: 0 success, 2 invalid configuration, 3 acceptance gate failed,
4 numerical error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__, serialize
from .activations import certify_assumption1, parse_activation
from .dist import JointDistribution
from .errors import (ConfigError, DegenerateDirection, EpsilonTooLarge, GeomlensError, InvalidDistribution,
                     OutOfImage, RankTooLarge)
from .experiments import analyze, load_config, run_sweep, sweep_csv, train_compare
from .netlab import load_net

EXIT_OK, EXIT_CONFIG, EXIT_GATE, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ERRORS = (ConfigError, EpsilonTooLarge, RankTooLarge, InvalidDistribution, DegenerateDirection, OutOfImage)


def _config(args):
    eps = None if args.eps is None else [float(e) for e in args.eps.split(",")]
    return load_config(args.config, eps=eps, seed=args.seed, rank=args.rank)


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_generate(args) -> int:
    cfg = _config(args)
    j = cfg.joint()
    _write(args.out, serialize.dumps(j.to_dict()))
    print(f"wrote {args.out}: {j.shape[0]}x{j.shape[1]} joint at eps={cfg.eps:g}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    try:
        j = JointDistribution.from_dict(serialize.load(args.dist))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read distribution {args.dist}: {exc}") from exc
    net = load_net(args.net) if args.net else None
    report = analyze(cfg, j, net)
    _write(args.out, serialize.dumps(report))
    for layer in report["layers"]:
        a = layer["analysis"]
        print(f"layer {layer['layer']}: rank {a['rank_k']}, ey_bound {serialize.format_float(a['ey_bound'])}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    report = run_sweep(cfg)
    out = Path(args.out)
    _write(out.with_suffix(".json"), serialize.dumps(report))
    _write(out.with_suffix(".csv"), sweep_csv(report))
    slopes = report["slopes"]
    if slopes["residual"] is None:
        print("single level: slopes and ratios not defined")
    else:
        print(f"residual slope {slopes['residual']:.4f}")
        for name, ok in report["gates"].items():
            print(f"gate {name}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_GATE


def cmd_train_compare(args) -> int:
    cfg = _config(args)
    report = train_compare(cfg)
    _write(args.out, serialize.dumps(report))
    ratio = report["ratio"]
    print(f"excess {report['excess_risk']:.6g}, ey_bound/2 {report['ey_bound'] / 2:.6g}, "
          f"ratio {'n/a' if ratio is None else f'{ratio:.4f}'}")
    for name, ok in report["gates"].items():
        print(f"gate {name}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_GATE


def cmd_certify(args) -> int:
    try:
        act = parse_activation(args.activation)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.probes < 100:
        raise ConfigError("--probes must be at least 100")
    cert = certify_assumption1(act, args.center, args.delta, args.probes)
    text = serialize.dumps({"activation": act.name, **cert.to_dict()})
    if args.out:
        _write(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomlens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"geomlens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--eps", help="eps value, or comma-separated sweep levels")
        p.add_argument("--seed", type=int)
        p.add_argument("--rank", type=int, help="rank of the output-layer analysis")
        return p

    p = with_config(sub.add_parser("generate", help="write the eps-dependent joint distribution"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("analyze", help="per-layer bundles and closed-form optima"))
    p.add_argument("--dist", required=True)
    p.add_argument("--net", help="network JSON; defaults to the closed-form network")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = with_config(sub.add_parser("sweep", help="eps sweep with slope and ratio gates"))
    p.add_argument("--out", required=True, help="output stem; .json and .csv are written")
    p.set_defaults(func=cmd_sweep)

    p = with_config(sub.add_parser("train-compare", help="train a net and compare with the rank-k bound"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_compare)

    p = sub.add_parser("certify-activation", help="check the local slope condition of an activation")
    p.add_argument("--activation", required=True)
    p.add_argument("--center", type=float, required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_certify)
    return parser


def origin_module(exc: BaseException) -> str:
    """Innermost package module on the traceback, i.e. where the error was raised."""
    found = "geomlens"
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("geomlens.") and name != __name__:
            found = name
        tb = tb.tb_next
    return found


def _report(exc: GeomlensError) -> None:
    print(f"error in {origin_module(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        _report(exc)
        return EXIT_CONFIG
    except GeomlensError as exc:
        _report(exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
