"""Command-line front end: configuration, orchestration and CSV output.

Every run writes ``<subcommand>.csv`` and ``manifest.json`` into the output
directory (``--out``, else ``$FBSDELAB_OUT``, else ``./fbsdelab_out``).
Numbers use 17 significant digits and ``\\n`` line endings so repeated runs
are byte-identical. Exit codes: 0 success, 2 validation error, 3
non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
import time
import warnings
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import control as ctl
from .conditions import yin_lower_bound
from .errors import (CoverageError, DivergenceError, InvalidInputError, InvalidModeError,
                     NonConvergenceError, RegressionError)
from .field import (build_field, decoupling_residual, ikw_cases, ikw_residual, loglog_slope,
                    stationarity_test)
from .core import TimeGrid
from .models import ZOO, shifted_driver
from .picard import SolveConfig, comparison_harness, sensitivity_harness, solve_fbsde, window_for

OUT_ENV = "FBSDELAB_OUT"
DEFAULT_OUT = "fbsdelab_out"

SUBCOMMANDS = ("check-window", "solve", "compare", "sensitivity", "field", "stationarity",
               "ikw-check", "control", "zoo-list")

# lambda inside each model's window (or its decaying side for decoupled ones)
MODEL_LAMBDA = {"krugman": -0.35, "dornbusch": -0.4, "blanchard": -0.3,
                "black_consol": -0.01, "linear": -0.2}

MODEL_PARAMS = ("gamma", "sigma", "m", "x0", "nu", "xi", "vartheta", "eta", "phi", "a1", "a2",
                "a3", "rho", "theta_s", "i", "g", "c", "mu", "alpha", "r0", "a", "by", "b0",
                "fx", "fy", "f0")

SOLVE_KEYS = {"lam": float, "tol": float, "max_iter": int, "dt": float, "horizon": float,
              "paths": int, "seed": int, "mode": str, "threads": int, "t0": float,
              "degree": int, "ridge": float, "tail_tol": float, "refine_horizon": bool,
              "max_doublings": int, "pilot_paths": int}

RUN_DEFAULTS: Dict[str, Dict[str, object]] = {
    "check-window": {},
    "solve": {},
    "compare": {"delta": 0.1},
    "sensitivity": {"dx": "0.1,0.05,0.025"},
    "field": {"t_nodes": "0,2,4", "x_min": -1.0, "x_max": 1.0, "h": 0.05,
              "horizon_end": 20.0, "group_paths": 128},
    "stationarity": {"t_start": 2.0, "shift": 3.0, "x": "", "samples": 500, "group_paths": 64,
                     "level": 0.01},
    "ikw-check": {"dts": "0.02,0.01,0.005", "ikw_paths": 20000},
    "control": {"problem": "lq", "budget": 20, "k0": 0.0, "c0": 0.2},
    "zoo-list": {},
}


class UsageError(Exception):
    """Validation failure detected by the CLI itself."""


# --------------------------------------------------------------------------
# formatting
# --------------------------------------------------------------------------


def fmt(v) -> str:
    """Fixed textual form: floats with 17 significant digits."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.17g" % v
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else fmt(v)
    return v


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def parse_config_text(text: str) -> Dict[str, Dict[str, str]]:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, Dict[str, str]] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected 'section.key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise UsageError(f"config line {n}: key must be 'section.key'")
        sec, k = key.split(".", 1)
        out.setdefault(sec, {})[k] = val
    return out


def load_config(path: str) -> Dict[str, Dict[str, str]]:
    """Config text file, or a previous run's ``manifest.json``."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        data = json.loads(text)
        cfg = data.get("config", {})
        return {s: {k: fmt(v) for k, v in d.items()} for s, d in cfg.items()}
    return parse_config_text(text)


def _convert(kind, text: str):
    if kind is bool:
        low = str(text).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {text!r}")
    try:
        return kind(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse {text!r} as {kind.__name__}") from exc


def _floats(text) -> List[float]:
    if isinstance(text, (int, float)):
        return [float(text)]
    try:
        return [float(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def resolve(sub: str, args: argparse.Namespace) -> Dict[str, Dict[str, object]]:
    """Merge defaults, the config file and flags (flags win)."""
    file_cfg = load_config(args.config) if args.config else {}
    for sec in file_cfg:
        if sec not in ("solve", "model", "run"):
            raise UsageError(f"unknown config section {sec!r}")

    model = {"name": "krugman"}
    for k, v in file_cfg.get("model", {}).items():
        if k != "name" and k not in MODEL_PARAMS:
            raise UsageError(f"unknown model parameter {k!r}")
        model[k] = v if k == "name" else _convert(float, v)
    if args.model is not None:
        model["name"] = args.model
    for k in MODEL_PARAMS:
        v = getattr(args, k, None)
        if v is not None:
            model[k] = float(v)
    if model["name"] not in ZOO:
        raise UsageError(f"unknown model {model['name']!r}; choose from {sorted(ZOO)}")

    base = SolveConfig(lam=MODEL_LAMBDA.get(model["name"], -0.1))
    solve = {k: getattr(base, k) for k in SOLVE_KEYS}
    for k, v in file_cfg.get("solve", {}).items():
        if k not in SOLVE_KEYS:
            raise UsageError(f"unknown solve setting {k!r}")
        solve[k] = _convert(SOLVE_KEYS[k], v)
    flag_map = dict(lam="lambda_", tol="tol", max_iter="max_iter", dt="dt", horizon="horizon",
                    paths="paths", seed="seed", mode="mode", threads="threads")
    for k, a in flag_map.items():
        v = getattr(args, a, None)
        if v is not None:
            solve[k] = v

    run = dict(RUN_DEFAULTS[sub])
    for k, v in file_cfg.get("run", {}).items():
        if k not in run:
            raise UsageError(f"unknown run setting {k!r} for {sub}")
        kind = type(run[k])
        run[k] = v if kind is str else _convert(kind, v)
    for k in run:
        v = getattr(args, k, None)
        if v is not None:
            run[k] = v
    return {"model": model, "solve": solve, "run": run}


def config_text(cfg: Dict[str, Dict[str, object]]) -> str:
    """Inverse of ``parse_config_text`` for a resolved configuration."""
    lines = []
    for sec in ("model", "solve", "run"):
        for k in sorted(cfg[sec]):
            lines.append(f"{sec}.{k} = {fmt(cfg[sec][k])}")
    return "\n".join(lines) + "\n"


def _solve_config(cfg) -> SolveConfig:
    try:
        return SolveConfig(**cfg["solve"])
    except TypeError as exc:
        raise UsageError(str(exc)) from exc


def _model(cfg):
    params = {k: v for k, v in cfg["model"].items() if k != "name"}
    return ZOO[cfg["model"]["name"]](**params)


def _x0(model, cfg):
    if "x0" in cfg["model"]:
        return np.atleast_1d(float(cfg["model"]["x0"]))
    if model.x0 is not None:
        return np.atleast_1d(np.asarray(model.x0, float))
    return np.zeros(model.coeffs.n)


# --------------------------------------------------------------------------
# subcommands: each returns (header, rows, diagnostics, exit_code)
# --------------------------------------------------------------------------


def cmd_check_window(cfg):
    model = _model(cfg)
    c = model.coeffs.constants
    w = window_for(model.coeffs)
    try:
        yin = yin_lower_bound(c)
    except (InvalidInputError, ZeroDivisionError):
        yin = float("nan")
    row = [model.name, w.gamma, w.lower, w.upper, w.feasible, w.contains(cfg["solve"]["lam"]), yin]
    return (["model", "gamma", "lower", "upper", "feasible", "lambda_in_window", "yin_lower"],
            [row], {}, 0)


def _diag_summary(d):
    return dict(iterations=d.iterations, contraction_ratios=list(d.contraction_ratios),
                final_residual=d.final_residual, horizon_used=d.horizon_used,
                converged=d.converged, diverged=d.diverged, mode=d.mode,
                y0=None if d.y0 is None else np.asarray(d.y0).ravel().tolist(),
                y0_se=None if d.y0_se is None else np.asarray(d.y0_se).ravel().tolist(),
                tail=d.tail, lambda_in_window=d.lambda_in_window,
                horizon_history=[list(h) for h in d.horizon_history], notes=list(d.notes))


def cmd_solve(cfg):
    model = _model(cfg)
    sc = _solve_config(cfg)
    _, d = solve_fbsde(model, _x0(model, cfg), sc, store=False)
    c = model.coeffs
    header = (["t"] + [f"mean_X{j}" for j in range(c.n)] + [f"mean_Y{j}" for j in range(c.m)]
              + [f"mean_Z{j}_{k}" for j in range(c.m) for k in range(c.d)] + ["se_Y0"])
    rows = []
    if d.grid is not None and d.mean_Y is not None:
        times = d.grid.times()
        mx = np.asarray(d.mean_X).reshape(times.size, -1)
        my = np.asarray(d.mean_Y).reshape(times.size, -1)
        mz = np.asarray(d.mean_Z).reshape(times.size, -1)
        se0 = float(np.asarray(d.y0_se).ravel()[0]) if d.y0_se is not None else None
        for i, t in enumerate(times):
            rows.append([float(t)] + mx[i].tolist() + my[i].tolist() + mz[i].tolist()
                        + [se0 if i == 0 else None])
    code = 0 if d.converged and not d.diverged else 3
    return header, rows, _diag_summary(d), code


def cmd_compare(cfg):
    model = _model(cfg)
    delta = float(cfg["run"]["delta"])
    r = comparison_harness(shifted_driver(model, delta), model, _x0(model, cfg),
                           _solve_config(cfg))
    row = [delta, r.y1, r.y2, r.difference, r.se, r.passed, r.spot_check_ok, r.horizon]
    return (["delta", "y1", "y2", "difference", "se", "passed", "spot_check_ok", "horizon"],
            [row], {}, 0)


def cmd_sensitivity(cfg):
    model = _model(cfg)
    dx = _floats(cfg["run"]["dx"])
    r = sensitivity_harness(model, _x0(model, cfg), dx=dx, config=_solve_config(cfg))
    rows = [[h, a, b, z, q] for h, a, b, z, q in
            zip(r.dx, r.sup_dX, r.sup_dY, r.norm_dZ, r.ratios)]
    diag = dict(slope_dx=r.slope_dx, fitted_C=r.fitted_C, passed=r.passed)
    return ["dx", "sup_dX", "sup_dY", "norm_dZ", "ratio"], rows, diag, 0


def cmd_field(cfg):
    model = _model(cfg)
    run = cfg["run"]
    if model.coeffs.n != 1:
        raise UsageError("the field subcommand tabulates one-dimensional states")
    h = float(run["h"])
    if not h > 0 or not run["x_max"] > run["x_min"]:
        raise UsageError("lattice needs h > 0 and x_max > x_min")
    n = int(round((run["x_max"] - run["x_min"]) / h))
    lat = run["x_min"] + h * np.arange(n + 1)
    sc = _solve_config(cfg)
    fld = build_field(model, _floats(run["t_nodes"]), [lat], sc,
                      horizon_end=float(run["horizon_end"]), group_paths=int(run["group_paths"]))
    if fld.random:
        raise UsageError("the field subcommand tabulates deterministic-coefficient models")
    m = model.coeffs.m
    header = ["t", "x0"] + [f"value{j}" for j in range(m)] + [f"grad{j}_0" for j in range(m)]
    rows = []
    for j, t in enumerate(fld.t_nodes):
        for l, x in enumerate(lat):
            rows.append([float(t), float(x)] + fld.values[j, l].tolist()
                        + np.asarray(fld.gradient[j, l]).ravel().tolist())
    diag = dict(masked=fld.mask.tolist())
    try:
        diag["decoupling_residual"] = decoupling_residual(model, fld, sc.with_(paths=min(sc.paths, 4096)),
                                                          x0=_x0(model, cfg))
    except CoverageError as exc:
        diag["decoupling_residual"] = f"unavailable: {exc}"
    return header, rows, diag, 0


def cmd_stationarity(cfg):
    model = _model(cfg)
    run = cfg["run"]
    x = _floats(run["x"]) if str(run["x"]).strip() else _x0(model, cfg).tolist()
    r = stationarity_test(model, float(run["t_start"]), float(run["shift"]), x, int(run["samples"]),
                          _solve_config(cfg), horizon=cfg["solve"]["horizon"],
                          group_paths=int(run["group_paths"]), level=float(run["level"]))
    return (["t", "shift", "ks_stat", "p_value", "passed"],
            [[run["t_start"], run["shift"], r.ks_stat, r.p_value, r.passed]], {}, 0)


def cmd_ikw(cfg):
    dts = _floats(cfg["run"]["dts"])
    rows, diag = [], {}
    for case in ikw_cases():
        res = [ikw_residual(case, TimeGrid.from_step(0.0, 1.0, h), paths=int(cfg["run"]["ikw_paths"]),
                            seed=cfg["solve"]["seed"]) for h in dts]
        slope = loglog_slope(dts, res)
        diag[case.name] = slope
        rows += [[case.name, h, v, slope] for h, v in zip(dts, res)]
    return ["case", "dt", "residual", "slope"], rows, diag, 0


def cmd_control(cfg):
    run = cfg["run"]
    sc = _solve_config(cfg).with_(refine_horizon=False)
    if run["problem"] == "lq":
        problem = ctl.lq_problem(ctl.LQParams(lam=sc.lam))
    elif run["problem"] == "krugman":
        p = cfg["model"]
        problem = ctl.krugman_control_problem(p.get("gamma", 5.0), p.get("sigma", 0.1), sc.lam)
    else:
        raise UsageError("control problem must be 'lq' or 'krugman'")
    start = ctl.Policy.affine(float(run["k0"]), 0.0, float(run["c0"]))
    x0 = np.atleast_1d(float(cfg["model"].get("x0", 0.5)))
    res = ctl.optimize_policy(problem, start, int(run["budget"]), x0, ctl.ControlConfig(solve=sc),
                              free=[True, False, True])
    labels = start.labels()
    rows = [[it, c, se] + list(theta) for it, c, se, theta in res.trace]
    diag = dict(budget_exhausted=res.budget_exhausted, gradient_norm=res.gradient_norm,
                policy=dict(zip(labels, res.policy.vector().tolist())))
    return ["iteration", "cost", "se"] + labels, rows, diag, 0


def cmd_zoo_list(cfg):
    rows = []
    for name in sorted(ZOO):
        try:
            m = ZOO[name]()
        except InvalidInputError:
            continue
        c = m.coeffs
        w = window_for(c)
        rows.append([name, c.n, c.m, c.d, c.autonomous, c.deterministic_coefficients,
                     m.oracle is not None, w.lower, w.upper, MODEL_LAMBDA.get(name, -0.1)])
    return (["model", "n", "m", "d", "autonomous", "deterministic", "oracle", "window_lower",
             "window_upper", "default_lambda"], rows, {}, 0)


COMMANDS = {"check-window": cmd_check_window, "solve": cmd_solve, "compare": cmd_compare,
            "sensitivity": cmd_sensitivity, "field": cmd_field, "stationarity": cmd_stationarity,
            "ikw-check": cmd_ikw, "control": cmd_control, "zoo-list": cmd_zoo_list}


# --------------------------------------------------------------------------
# parser and entry points
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbsdelab", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = subs.add_parser(name)
        p.add_argument("--config", help="'section.key = value' file or a manifest.json")
        p.add_argument("--model")
        p.add_argument("--seed", type=int)
        p.add_argument("--paths", type=int)
        p.add_argument("--dt", type=float)
        p.add_argument("--horizon", type=float)
        p.add_argument("--lambda", dest="lambda_", type=float)
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", dest="max_iter", type=int)
        p.add_argument("--mode", choices=("auto", "gamma1", "gamma2"))
        p.add_argument("--out")
        p.add_argument("--threads", type=int)
        for k in MODEL_PARAMS:
            p.add_argument("--" + k.replace("_", "-"), dest=k, type=float)
        for k, v in RUN_DEFAULTS[name].items():
            p.add_argument("--" + k.replace("_", "-"), dest=k,
                           type=str if isinstance(v, str) else type(v))
    return parser


def _versions() -> Dict[str, str]:
    import scipy

    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"artifact": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    sub = args.command
    start = time.perf_counter()
    cfg = None
    try:
        cfg = resolve(sub, args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            header, rows, diag, code = COMMANDS[sub](cfg)
        diag = dict(diag, warnings=sorted({str(w.message) for w in caught}))
    except (UsageError, InvalidInputError, InvalidModeError) as exc:
        print(f"fbsdelab {sub}: error: {exc}", file=sys.stderr)
        return 2
    except (NonConvergenceError, DivergenceError, RegressionError) as exc:
        print(f"fbsdelab {sub}: did not converge: {exc}", file=sys.stderr)
        return 3
    out = out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{sub}.csv"
    write_csv(csv_path, header, rows)
    manifest = {"command": sub, "config": cfg, "config_text": config_text(cfg),
                "seed": cfg["solve"]["seed"], "versions": _versions(),
                "wall_time_s": time.perf_counter() - start, "exit_code": code,
                "csv": csv_path.name, "diagnostics": diag}
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True)
                                       + "\n", encoding="utf-8")
    print(f"wrote {csv_path}")
    return code


def main() -> None:
    sys.exit(run())
