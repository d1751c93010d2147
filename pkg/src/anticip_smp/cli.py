"""Batch runner: ``anticip-smp <subcommand> [--config PATH] [overrides]``.

Subcommands
-----------
run                 cost, stationarity, duality and gradient diagnostics at u*
convergence         h-halving study of the adjoint against its oracle
gradient-check      finite difference of J against the adjoint pairing
duality-check       kernel pairing gaps of the variational duality
sufficiency-probe   costs of random perturbations of u*

Exit codes: 0 success, 2 invalid configuration, 3 solver failure,
4 a check exceeded its tolerance.

The configuration is one JSON document::

    {
      "problem": "lq",                       # or {"example": "lq", "params": {...}}
      "grid": {"T": 1.0, "n_steps": 100},
      "estimator": {"kind": "poly", "degree": 2},
      "n_paths": 2000,
      "seed": 7,
      "tolerances": {"picard_tol": 1e-13, "stationarity_tol": null,
                     "duality_tol": 1e-12, "gradient_eps": 1e-4,
                     "gradient_tol": 1e-2, "sufficiency_slack": null},
      "gradient": {"base": "shifted", "shift": 0.5},
      "probe": {"n_perturbations": 50, "magnitude": 0.1},
      "halvings": 3,
      "outputs": {"out_dir": "out"}
    }

``null`` tolerances fall back to grid-scaled defaults (see README).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .errors import AnticipSmpError, LagMisaligned, TailTooWide
from .estimators import estimator_from_dict
from .examples import EXAMPLES, ExampleCase, build_example
from .gridrng import brownian_increments
from .isdde import euler_maruyama, lq_adjoint_forward_problem
from .smp import (
    check_stationarity,
    control_path,
    direction_path,
    duality_check,
    evaluate,
    gradient_check,
    linearize,
    solve_adjoint,
    stationarity_process,
    sufficiency_probe,
    variational_solve,
)

SUBCOMMANDS = ("run", "convergence", "gradient-check", "duality-check", "sufficiency-probe")

SUMMARY_KEYS = {
    "run": (
        "command", "example", "n_steps", "n_paths", "seed", "J", "max_violation",
        "stationarity_tol", "duality_gap", "gradient_fd", "gradient_pairing",
        "gradient_rel_error", "picard_iterations", "passed",
    ),
    "convergence": ("command", "example", "n_paths", "seed", "h", "strong_error", "rate", "passed"),
    "gradient-check": (
        "command", "example", "n_steps", "n_paths", "seed", "eps", "gradient_fd",
        "gradient_pairing", "gradient_rel_error", "coarse_rel_error", "gradient_tol", "passed",
    ),
    "duality-check": ("command", "example", "n_steps", "n_paths", "seed", "duality_gap", "duality_tol", "passed"),
    "sufficiency-probe": (
        "command", "example", "n_steps", "n_paths", "seed", "n_perturbations", "magnitude",
        "J_star", "min_increase", "slack", "passed",
    ),
}

DEFAULTS = {
    "problem": "consumption",
    "grid": {},
    "estimator": None,
    "n_paths": 1,
    "seed": 0,
    "tolerances": {
        "picard_tol": 1e-13,
        "stationarity_tol": None,
        "duality_tol": 1e-12,
        "gradient_eps": 1e-4,
        "gradient_tol": 1e-2,
        "sufficiency_slack": None,
    },
    "gradient": {"base": "shifted", "shift": 0.5},
    "probe": {"n_perturbations": 50, "magnitude": 0.1},
    "halvings": 3,
    "outputs": {"out_dir": "anticip_smp_out"},
}

DEFAULT_STEPS = {"climate": 200, "consumption": 500, "lq": 100}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# ----------------------------------------------------------------- formatting


def fmt(x) -> str:
    """Fixed 17-significant-digit rendering used in every output file."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _json(obj) -> str:
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        s = fmt(obj)
        return s if s not in ("nan", "inf", "-inf") else json.dumps(s)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_json(v)}" for k, v in obj.items()) + "}"
    return "[" + ", ".join(_json(v) for v in obj) + "]"


def write_summary(path: Path, summary: dict) -> None:
    path.write_text(_json(summary) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


# --------------------------------------------------------------------- config


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc.strerror}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be an object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"config: unknown field {sorted(unknown)[0]!r}")
        cfg = _merge(cfg, doc)
    if args.example is not None:
        cfg["problem"] = args.example
    if args.n is not None:
        cfg["grid"]["n_steps"] = args.n
    if args.paths is not None:
        cfg["n_paths"] = args.paths
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out_dir is not None:
        cfg["outputs"]["out_dir"] = args.out_dir
    if getattr(args, "halvings", None) is not None:
        cfg["halvings"] = args.halvings
    if getattr(args, "perturbations", None) is not None:
        cfg["probe"]["n_perturbations"] = args.perturbations
    if getattr(args, "magnitude", None) is not None:
        cfg["probe"]["magnitude"] = args.magnitude
    return cfg


def _positive_int(value, field):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value or value < 1:
        raise ConfigError(f"{field} must be a positive integer (got {value!r})")
    return int(value)


def _positive(value, field):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0 or not math.isfinite(value):
        raise ConfigError(f"{field} must be a positive number (got {value!r})")
    return float(value)


def validate(cfg: dict) -> dict:
    """Normalize ``cfg`` in place; raises :class:`ConfigError`."""
    prob = cfg["problem"]
    if isinstance(prob, str):
        name, params = prob, {}
    elif isinstance(prob, dict):
        name, params = prob.get("example"), dict(prob.get("params", {}))
    else:
        raise ConfigError("problem must be an example name or an object")
    if name not in EXAMPLES:
        raise ConfigError(f"problem.example {name!r} is not one of {sorted(EXAMPLES)}")
    grid = cfg["grid"]
    if "T" in grid:
        params["T"] = _positive(grid["T"], "grid.T")
    unknown = set(grid) - {"T", "n_steps"}
    if unknown:
        raise ConfigError(f"grid.{sorted(unknown)[0]} is not a known field")
    n_steps = _positive_int(grid.get("n_steps", DEFAULT_STEPS[name]), "grid.n_steps")
    cfg["_example"], cfg["_params"], cfg["_n_steps"] = name, params, n_steps
    cfg["n_paths"] = _positive_int(cfg["n_paths"], "n_paths")
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a nonnegative integer (got {cfg['seed']!r})")
    tols = cfg["tolerances"]
    for key, val in tols.items():
        if key not in DEFAULTS["tolerances"]:
            raise ConfigError(f"tolerances.{key} is not a known field")
        if val is not None:
            tols[key] = _positive(val, f"tolerances.{key}")
    cfg["halvings"] = _positive_int(cfg["halvings"], "halvings")
    cfg["probe"]["n_perturbations"] = _positive_int(cfg["probe"]["n_perturbations"], "probe.n_perturbations")
    mag = cfg["probe"]["magnitude"]
    if isinstance(mag, bool) or not isinstance(mag, (int, float)) or mag < 0:
        raise ConfigError(f"probe.magnitude must be a nonnegative number (got {mag!r})")
    if cfg["gradient"].get("base") not in ("optimal", "shifted", "zero"):
        raise ConfigError(f"gradient.base must be optimal, shifted or zero (got {cfg['gradient'].get('base')!r})")
    if cfg["estimator"] is not None:
        try:
            estimator_from_dict(cfg["estimator"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"estimator: {exc}") from None
    try:
        case = build_example(name, n_steps, **params)
    except TypeError as exc:
        raise ConfigError(f"problem.params: {exc}") from None
    except (LagMisaligned, TailTooWide) as exc:
        raise ConfigError(f"grid.n_steps: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, AnticipSmpError):
            raise
        raise ConfigError(f"problem.params: {exc}") from None
    cfg["_case"] = case
    return cfg


# ---------------------------------------------------------------------- setup


def _context(cfg):
    case: ExampleCase = cfg["_case"]
    grid = case.problem.grid
    incs = brownian_increments(grid, cfg["n_paths"], cfg["seed"]) if case.stochastic else None
    if cfg["estimator"] is not None and case.stochastic:
        est = estimator_from_dict(cfg["estimator"])
    else:
        est = case.estimator(incs)
    return case, grid, incs, est


def _n_paths(case, cfg):
    return cfg["n_paths"] if case.stochastic else 1


def _stationarity_tol(cfg, case):
    tol = cfg["tolerances"]["stationarity_tol"]
    return tol if tol is not None else 10 * case.problem.grid.h * case.scale


def _base_control(cfg, case, u_star):
    pb = case.problem
    base = cfg["gradient"]["base"]
    if base == "optimal":
        return u_star
    if base == "zero":
        return control_path(pb, 0.0, u_star.n_paths)
    ctrl = pb.grid.control_nodes
    shifted = np.clip(u_star.values[:, ctrl] + float(cfg["gradient"]["shift"]), pb.u_lo, pb.u_hi)
    return control_path(pb, shifted)


def _direction(grid):
    return lambda t: np.sin(np.pi * np.asarray(t) / grid.T)


def _out_dir(cfg) -> Path:
    out = Path(cfg["outputs"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg, case, command):
    return {
        "command": command,
        "example": cfg["_example"],
        "n_steps": case.problem.grid.n_steps,
        "n_paths": _n_paths(case, cfg),
        "seed": cfg["seed"],
    }


# ------------------------------------------------------------------- commands


def cmd_run(cfg) -> int:
    case, grid, incs, est = _context(cfg)
    pb = case.problem
    ptol = cfg["tolerances"]["picard_tol"]
    u = case.optimal_control(incs, est)
    J, state, sweeps = evaluate(pb, u, incs, est, tol=ptol)
    lin = linearize(pb, u, state)
    p = solve_adjoint(pb, lin, incs)
    G = stationarity_process(pb, lin, p, incs, est)
    stol = _stationarity_tol(cfg, case)
    viol = check_stationarity(G, u, pb.u_lo, pb.u_hi)
    d = direction_path(pb, _direction(grid))
    hat = variational_solve(pb, lin, d, incs, est, tol=ptol)
    gap = duality_check(pb, lin, p, hat.Y, hat.Z)
    base = _base_control(cfg, case, u)
    fd, pairing, rel = gradient_check(pb, base, _direction(grid), cfg["tolerances"]["gradient_eps"], incs, est, tol=ptol)

    out = _out_dir(cfg)
    nodes = np.arange(grid.zero, grid.end + 1)
    cols = [u, G, p, state.Y, state.Z]
    rows = []
    for i in nodes:
        row = [grid.time(i), cols[0].values[:, i].mean(), cols[1].values[:, i].mean()]
        for ens in cols[2:]:
            row += [ens.mean()[i], ens.stderr()[i]]
        rows.append(row)
    write_csv(out / "nodes.csv", ["t", "u_star", "G", "p_mean", "p_stderr", "Y_mean", "Y_stderr", "Z_mean", "Z_stderr"], rows)
    # the gradient figures are reported; gradient-check is the command that gates on them
    passed = viol <= stol and gap <= cfg["tolerances"]["duality_tol"]
    summary = _header(cfg, case, "run")
    summary.update(
        J=J, max_violation=viol, stationarity_tol=stol, duality_gap=gap, gradient_fd=fd,
        gradient_pairing=pairing, gradient_rel_error=rel, picard_iterations=sweeps, passed=passed,
    )
    write_summary(out / "summary.json", summary)
    return 0 if passed else 4


def _numeric_adjoint(name, case, incs, est, ptol):
    """Adjoint from the solver side of each example's oracle comparison."""
    pb = case.problem
    grid = pb.grid
    if name == "lq":
        P = case.params
        return euler_maruyama(lq_adjoint_forward_problem(P.A, P.B, P.C, P.D, P.delta, grid), grid, incs)
    u = case.optimal_control(incs, est)
    _, state, _ = evaluate(pb, u, incs, est, tol=ptol)
    return solve_adjoint(pb, linearize(pb, u, state), incs)


def cmd_convergence(cfg) -> int:
    name = cfg["_example"]
    levels = [cfg["_n_steps"] * 2**k for k in range(cfg["halvings"] + 1)]
    finest = build_example(name, levels[-1], **cfg["_params"])
    stochastic = finest.stochastic
    fine_incs = brownian_increments(finest.problem.grid, cfg["n_paths"], cfg["seed"]) if stochastic else None
    hs, errs = [], []
    for n in levels:
        case = finest if n == levels[-1] else build_example(name, n, **cfg["_params"])
        grid = case.problem.grid
        incs = fine_incs.coarsen(levels[-1] // n) if stochastic else None
        est = case.estimator(incs)
        num = _numeric_adjoint(name, case, incs, est, cfg["tolerances"]["picard_tol"])
        ref = case.adjoint_oracle(incs)
        if stochastic:
            diff = num.values[:, grid.end] - ref.values[:, grid.end]
            err = float(np.sqrt(np.mean(diff**2)))
        else:
            sl = slice(grid.zero, grid.end + 1)
            err = float(np.max(np.abs(num.values[:, sl] - ref.values[:, sl])))
        hs.append(grid.h)
        errs.append(err)
    positive = all(e > 0 for e in errs)
    rate = float(np.polyfit(np.log(hs), np.log(errs), 1)[0]) if positive and len(hs) > 1 else float("nan")
    out = _out_dir(cfg)
    write_csv(out / "convergence.csv", ["h", "strong_error"], zip(hs, errs))
    summary = {
        "command": "convergence",
        "example": name,
        "n_paths": cfg["n_paths"] if stochastic else 1,
        "seed": cfg["seed"],
        "h": hs,
        "strong_error": errs,
        "rate": rate,
        "passed": bool(all(b <= a for a, b in zip(errs, errs[1:]))),
    }
    write_summary(out / "summary.json", summary)
    return 0 if summary["passed"] else 4


def cmd_gradient(cfg) -> int:
    case, grid, incs, est = _context(cfg)
    pb = case.problem
    ptol = cfg["tolerances"]["picard_tol"]
    eps = cfg["tolerances"]["gradient_eps"]
    base = _base_control(cfg, case, case.optimal_control(incs, est))
    fd, pairing, rel = gradient_check(pb, base, _direction(grid), eps, incs, est, tol=ptol)
    coarse = gradient_check(pb, base, _direction(grid), 10 * eps, incs, est, tol=ptol)[2]
    tol = cfg["tolerances"]["gradient_tol"]
    summary = _header(cfg, case, "gradient-check")
    summary.update(
        eps=eps, gradient_fd=fd, gradient_pairing=pairing, gradient_rel_error=rel,
        coarse_rel_error=coarse, gradient_tol=tol, passed=rel <= tol,
    )
    write_summary(_out_dir(cfg) / "summary.json", summary)
    return 0 if rel <= tol else 4


def cmd_duality(cfg) -> int:
    case, grid, incs, est = _context(cfg)
    pb = case.problem
    ptol = cfg["tolerances"]["picard_tol"]
    u = case.optimal_control(incs, est)
    _, state, _ = evaluate(pb, u, incs, est, tol=ptol)
    lin = linearize(pb, u, state)
    p = solve_adjoint(pb, lin, incs)
    d = direction_path(pb, _direction(grid))
    hat = variational_solve(pb, lin, d, incs, est, tol=ptol)
    gap = duality_check(pb, lin, p, hat.Y, hat.Z)
    tol = cfg["tolerances"]["duality_tol"]
    summary = _header(cfg, case, "duality-check")
    summary.update(duality_gap=gap, duality_tol=tol, passed=gap <= tol)
    write_summary(_out_dir(cfg) / "summary.json", summary)
    return 0 if gap <= tol else 4


def cmd_sufficiency(cfg) -> int:
    case, grid, incs, est = _context(cfg)
    pb = case.problem
    n_pert = cfg["probe"]["n_perturbations"]
    mag = float(cfg["probe"]["magnitude"])
    u = case.optimal_control(incs, est)
    pairs = sufficiency_probe(pb, u, n_pert, mag, cfg["seed"], incs, est)
    slack = cfg["tolerances"]["sufficiency_slack"]
    if slack is None:
        slack = 10 * grid.h * case.scale * mag
    inc = [b - a for a, b in pairs]
    out = _out_dir(cfg)
    write_csv(out / "probe.csv", ["k", "J_star", "J_perturbed", "increase"], [(k, a, b, b - a) for k, (a, b) in enumerate(pairs)])
    passed = min(inc) >= -slack
    summary = _header(cfg, case, "sufficiency-probe")
    summary.update(
        n_perturbations=n_pert, magnitude=mag, J_star=pairs[0][0], min_increase=min(inc), slack=slack, passed=passed,
    )
    write_summary(out / "summary.json", summary)
    return 0 if passed else 4


COMMANDS = {
    "run": cmd_run,
    "convergence": cmd_convergence,
    "gradient-check": cmd_gradient,
    "duality-check": cmd_duality,
    "sufficiency-probe": cmd_sufficiency,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anticip-smp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--example", help=f"example name ({', '.join(sorted(EXAMPLES))})")
        sp.add_argument("--n", type=int, help="number of time steps")
        sp.add_argument("--paths", type=int, help="number of Monte Carlo paths")
        sp.add_argument("--seed", type=int, help="noise seed")
        sp.add_argument("--out-dir", help="directory for CSV and JSON outputs")
        if name == "convergence":
            sp.add_argument("--halvings", type=int, help="number of step halvings after the coarsest grid")
        if name == "sufficiency-probe":
            sp.add_argument("--perturbations", type=int, help="number of random perturbations")
            sp.add_argument("--magnitude", type=float, help="sup norm of each perturbation")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = validate(load_config(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AnticipSmpError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    try:
        return COMMANDS[args.command](cfg)
    except AnticipSmpError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
