"""Command-line driver: ``fretree <command> [options]``.

Exit codes: 0 success, 2 input error, 3 validation failure, 4 solver failure.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import __version__
from .distance import distance_report
from .dp import nominal_expectation
from .distributions import FrechetParams, SampleState, fit_quantile_table, gumbel_estimate, sample
from .errors import (
    BuildError,
    ConfigError,
    ContractError,
    DomainError,
    DualSolveError,
    EstimationError,
    FitError,
    InfeasibleError,
    InfiniteMeanError,
    InputError,
    NodeLookupError,
    ParameterError,
    UnboundedError,
)
from .flood import (
    FloodModelConfig,
    build_model,
    capital_distribution,
    default_exposure,
    load_sweep,
    rows_to_csv,
    solve,
    trajectories_for,
)
from .io import OutputDir, RunManifest, load_config, read_sample, read_table, read_text
from .quantize import LloydConfig, frechet_view, lloyd_w1, uniform_view
from .robust import robust_expectation, theta_sweep
from .tree import GROUP1, BuildSpec, ScenarioTree, build_tree, validate

EXIT_OK, EXIT_INPUT, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3, 4
INPUT_ERRORS = (InputError, ConfigError, FitError, DomainError, ParameterError, ContractError,
                NodeLookupError, InfiniteMeanError)
SOLVER_ERRORS = (InfeasibleError, UnboundedError, DualSolveError, BuildError, EstimationError)


class ValidationFailure(Exception):
    pass


def _float_list(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {exc}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


# --------------------------------------------------------------------------
# Shared builders
# --------------------------------------------------------------------------


def _base_law(cfg: dict) -> FrechetParams:
    return FrechetParams(cfg["lambda"], cfg["u"], cfg["epsilon"])


def _base_sample(cfg: dict) -> SampleState:
    return SampleState.from_values(sample(_base_law(cfg), cfg["sample_size"], seed=cfg["seed"]))


def _build(cfg: dict):
    """Tree from the base sample; returns ``(tree, fitted base law)``."""
    br = cfg["branchiness"]
    if "stages" in cfg and cfg["stages"] != len(br):
        raise ConfigError(f"stages = {cfg['stages']} but branchiness has {len(br)} entries")
    state = _base_sample(cfg)
    params = gumbel_estimate(state)
    spec = BuildSpec(params, state, list(br), threshold=cfg["pnl"])
    return build_tree(spec, LloydConfig(seed=cfg["seed"])), params


def _tree_and_exposure(cfg: dict):
    """Tree from ``tree`` (a JSON file) or built from the config."""
    if "tree" in cfg:
        tree = ScenarioTree.from_json(read_text(cfg["tree"]))
        if "stages" in cfg and cfg["stages"] != tree.stages:
            raise ConfigError(f"stages = {cfg['stages']} but the tree has {tree.stages}")
        return tree, cfg.get("exposure", 1.0), False
    tree, params = _build(cfg)
    return tree, cfg.get("exposure") or default_exposure(params), True


def _flood_config(cfg: dict, stages: int) -> FloodModelConfig:
    return FloodModelConfig(alpha=cfg["alpha"], beta=cfg["beta"], delta=cfg["delta"],
                            rho=cfg["rho"], gamma=cfg["gamma"], V=cfg["load"], S0=cfg["s0"],
                            T=stages, pnl=cfg["pnl"], exposure=cfg.get("exposure"),
                            K=cfg["trajectories"], seed=cfg["seed"])


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_fit(args, cfg, out: OutputDir) -> int:
    table = read_table(args.table)
    fit = fit_quantile_table(table, cfg["family"])
    rel = fit.relative_errors
    report = fit.to_dict()
    report.update(table=args.table, pnl=table.pnl, max_relative_error=float(np.max(rel)))
    out.write_json("fit.json", report)
    print(f"{fit.family}: {fit.params.to_dict()}  max relative error {np.max(rel):.4f}")
    return EXIT_OK


def cmd_estimate(args, cfg, out: OutputDir) -> int:
    if args.sample:
        state = SampleState.from_values(read_sample(args.sample))
        source = {"sample": args.sample}
    else:
        state = _base_sample(cfg)
        source = {"law": _base_law(cfg).to_dict(), "sample_size": cfg["sample_size"]}
    params = gumbel_estimate(state)
    report = {"params": params.to_dict(), "median": params.median, "N": state.N,
              "x1": state.x1, "xs": state.xs, "xN": state.xN, "source": source}
    out.write_json("estimate.json", report)
    print(f"lambda={params.lam:.6g} u={params.u:.6g} epsilon={params.epsilon:.6g}")
    return EXIT_OK


def cmd_quantize(args, cfg, out: OutputDir) -> int:
    if cfg["law"] not in ("uniform", "frechet"):
        raise ConfigError(f"unknown law {cfg['law']!r}")
    dist = uniform_view() if cfg["law"] == "uniform" else frechet_view(_base_law(cfg))
    q = lloyd_w1(dist, cfg["n"], LloydConfig(seed=cfg["seed"]))
    report = q.to_dict()
    report.update(law=cfg["law"], n=q.n, iterations=q.iterations, converged=q.converged)
    if cfg["law"] == "frechet":
        report["params"] = _base_law(cfg).to_dict()
    out.write_json("quantization.json", report)
    print(f"n={q.n} distortion={q.distortion:.10g}")
    return EXIT_OK


def cmd_tree(args, cfg, out: OutputDir) -> int:
    tree, params = _build(cfg)
    report = validate(tree)
    g1 = sum(n.group == GROUP1 for n in tree.nodes)
    frac = g1 / len(tree.nodes)
    out.write("tree.json", tree.to_json())
    summary = report.to_dict()
    summary.update(group1_nodes=g1, nodes=len(tree.nodes), group1_fraction=frac,
                   base_law=params.to_dict())
    out.write_json("validation.json", summary)
    print(f"Group-1 node fraction: {frac:.6f} ({g1} of {len(tree.nodes)})")
    if not report.ok:
        for v in report.violations:
            print(f"violation [{v.kind}] node {v.node}: {v.message}", file=sys.stderr)
        raise ValidationFailure(f"{len(report.violations)} tree invariant violations")
    return EXIT_OK


def cmd_distance(args, cfg, out: OutputDir) -> int:
    a = ScenarioTree.from_json(read_text(args.tree_a))
    b = ScenarioTree.from_json(read_text(args.tree_b))
    rep = distance_report(a, b)
    rep["bound_holds"] = bool(rep["stagewise_bound"] >= rep["nested"] - 1e-12)
    out.write_json("distance.json", rep)
    print(f"nested={rep['nested']:.10g} bound={rep['stagewise_bound']:.10g}")
    return EXIT_OK


def _sweep(kind, values, fcfg, tree, exposure, threads):
    if kind == "load":
        rows = load_sweep(fcfg, tree, values, exposure, threads=threads)
        return rows_to_csv(rows, list(rows[0]))
    model = build_model(fcfg, tree, exposure)
    rows = theta_sweep(model, tree, trajectories_for(fcfg), values, threads=threads)
    return rows_to_csv(rows, list(rows[0]))


def _sweep_values(args, cfg, kind):
    if args.values is not None:
        return args.values
    return cfg["loads"] if kind == "load" else cfg["thetas"]


def cmd_solve(args, cfg, out: OutputDir) -> int:
    tree, exposure, built = _tree_and_exposure(cfg)
    fcfg = _flood_config(cfg, tree.stages)
    theta = args.robust if args.robust is not None else cfg.get("theta")
    if built:
        out.write("tree.json", tree.to_json())
    policy = solve(fcfg, tree, exposure, theta=theta, threads=args.threads)
    agg = nominal_expectation if theta is None else robust_expectation(theta)
    dist = capital_distribution(policy, tree, fcfg, exposure, agg)
    out.write("policy.csv", policy.to_csv())
    out.write("capital.csv", dist.to_csv())
    value = {"value": policy.value, "theta": theta, "exposure": exposure, "stages": tree.stages,
             "root_decisions": dict(zip(policy.decision_names, map(float, policy.root_decisions))),
             "subproblems": policy.subproblems}
    out.write_json("value.json", value)
    if args.sweep:
        if theta is not None and args.sweep == "load":
            raise ConfigError("a load sweep is nominal; drop --robust")
        out.write("sweep.csv", _sweep(args.sweep, _sweep_values(args, cfg, args.sweep), fcfg,
                                      tree, exposure, args.threads))
    print(f"value={policy.value:.10g}")
    return EXIT_OK


def cmd_sweep(args, cfg, out: OutputDir) -> int:
    tree, exposure, _ = _tree_and_exposure(cfg)
    fcfg = _flood_config(cfg, tree.stages)
    text = _sweep(args.kind, _sweep_values(args, cfg, args.kind), fcfg, tree, exposure, args.threads)
    out.write("sweep.csv", text)
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser and entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=_seed, metavar="U64", help="seed for every random draw")
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="worker threads for node solves (0 = auto)")
    common.add_argument("--out", default=".", metavar="DIR", help="output directory")
    common.add_argument("--record-time", action="store_true",
                        help="record wall-clock seconds in the manifest")

    p = argparse.ArgumentParser(prog="fretree", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fretree {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", parents=[common], help="fit a family to a loss quantile table")
    s.add_argument("table", help="CSV path or bundled fixture name")
    s.add_argument("--family", choices=("frechet", "weibull", "gumbel"))
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("estimate", parents=[common], help="quick Frechet estimate from a sample")
    s.add_argument("--sample", metavar="CSV", help="one-column sample; drawn from the config law if absent")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("quantize", parents=[common], help="optimal W1 quantizer")
    s.add_argument("--n", type=int, help="number of points")
    s.add_argument("--law", choices=("frechet", "uniform"))
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("tree", parents=[common], help="build and validate a scenario tree")
    s.set_defaults(func=cmd_tree)

    s = sub.add_parser("distance", parents=[common], help="nested distance between two trees")
    s.add_argument("tree_a")
    s.add_argument("tree_b")
    s.set_defaults(func=cmd_distance)

    s = sub.add_parser("solve", parents=[common], help="solve the budget allocation problem")
    s.add_argument("--tree", metavar="JSON", help="scenario tree file; built from the config if absent")
    s.add_argument("--robust", type=float, metavar="THETA", help="chi-square risk budget")
    s.add_argument("--sweep", choices=("load", "theta"), help="also write a parameter sweep")
    s.add_argument("--values", type=_float_list, help="comma-separated sweep values")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("sweep", parents=[common], help="value and root decisions across a parameter")
    s.add_argument("kind", choices=("load", "theta"))
    s.add_argument("--tree", metavar="JSON")
    s.add_argument("--values", type=_float_list)
    s.set_defaults(func=cmd_sweep)
    return p


def _overrides(args) -> dict:
    return {"seed": args.seed, "family": getattr(args, "family", None),
            "n": getattr(args, "n", None), "law": getattr(args, "law", None),
            "tree": getattr(args, "tree", None)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        if args.threads < 0:
            raise ConfigError("--threads must be nonnegative")
        cfg = load_config(args.config, _overrides(args))
        out = OutputDir(args.out)
        code = args.func(args, cfg, out)
        manifest = RunManifest(args.command, cfg, cfg["seed"], __version__)
        if args.record_time:
            manifest.wall_clock = time.perf_counter() - started
        out.write_manifest(manifest)
        return code
    except ValidationFailure as exc:
        print(f"fretree: validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except INPUT_ERRORS as exc:
        print(f"fretree: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SOLVER_ERRORS as exc:
        print(f"fretree: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
