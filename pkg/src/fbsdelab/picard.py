"""Contraction maps, the outer fixed-point loop with truncation-horizon
refinement, and the comparison / continuous-dependence harnesses."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .bsde import BasisConfig, BSDEResult, solve_bsde
from .conditions import LambdaWindow, gamma_ratio, lambda_window, lambda_window_optimal
from .core import (BrownianBundle, CoefficientSet, PathTriple, TimeGrid,
                   weighted_norm_array)
from .errors import (DecoupledSystemError, DivergenceError, InvalidInputError,
                     InvalidModeError)
from .simulate import StreamedForward, forward_paths, generate_brownian

MODES = ("auto", "gamma1", "gamma2")


@dataclass(frozen=True)
class SolveConfig:
    """Settings of ``solve_fbsde``.

    ``horizon`` is the initial truncation length measured from ``t0``; with
    ``refine_horizon`` it is doubled (on ``pilot_paths`` paths) until the
    tail rule holds.
    """

    lam: float = -0.1
    tol: float = 1e-4
    max_iter: int = 50
    dt: float = 0.01
    horizon: float = 20.0
    t0: float = 0.0
    paths: int = 10_000
    seed: int = 0
    mode: str = "auto"
    degree: int = 2
    ridge: float = 1e-8
    tail_tol: float = 1e-6
    refine_horizon: bool = True
    max_doublings: int = 6
    pilot_paths: int = 4096
    threads: int = 1
    terminal: Optional[Callable] = None
    fast_decoupled: bool = True
    block: int = 64
    memory_budget: float = 2.0e9

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}")
        if not (self.dt > 0 and self.horizon > 0 and self.paths >= 1):
            raise InvalidInputError("dt, horizon and paths must be positive")
        if not (self.tol > 0 and self.max_iter >= 1 and math.isfinite(self.lam)):
            raise InvalidInputError("tol, max_iter and lam must be valid")

    def with_(self, **kw) -> "SolveConfig":
        return replace(self, **kw)

    @property
    def basis(self) -> BasisConfig:
        return BasisConfig(self.degree, self.ridge)


@dataclass
class SolveDiagnostics:
    """Outcome of ``solve_fbsde``.

    ``contraction_ratios[k]`` is the ratio of the stopping metric of
    iteration ``k + 2`` to that of iteration ``k + 1``.
    """

    iterations: int
    contraction_ratios: List[float]
    final_residual: float
    horizon_used: float
    converged: bool
    mode: str = "auto"
    y0: Optional[np.ndarray] = None
    y0_se: Optional[np.ndarray] = None
    y0_samples: Optional[np.ndarray] = None
    tail: float = float("nan")
    window: Optional[LambdaWindow] = None
    lambda_in_window: Optional[bool] = None
    decoupled_fast_path: bool = False
    diverged: bool = False
    divergent_fraction: float = 0.0
    horizon_history: list = field(default_factory=list)
    ridge_events: int = 0
    residuals: List[float] = field(default_factory=list)
    grid: Optional[TimeGrid] = None
    mean_X: Optional[np.ndarray] = None
    mean_Y: Optional[np.ndarray] = None
    mean_Z: Optional[np.ndarray] = None
    msq_Y: Optional[np.ndarray] = None
    y_se: Optional[np.ndarray] = None
    z_se: Optional[np.ndarray] = None
    notes: List[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _coeffs_of(model) -> CoefficientSet:
    return getattr(model, "coeffs", model)


def _gamma_for_metric(coeffs: CoefficientSet) -> float:
    try:
        return gamma_ratio(coeffs.constants)
    except DecoupledSystemError:
        return 1.0


def _grid_for(cfg: SolveConfig, horizon: float) -> TimeGrid:
    return TimeGrid.from_step(cfg.t0, horizon, cfg.dt)


def _step_offset(cfg: SolveConfig) -> int:
    k = int(round(cfg.t0 / cfg.dt))
    if abs(k * cfg.dt - cfg.t0) > 1e-9 * max(1.0, abs(cfg.t0)) or k < 0:
        raise InvalidInputError("t0 must be a nonnegative multiple of dt")
    return k


def make_bundle(coeffs: CoefficientSet, cfg: SolveConfig, horizon: float, paths: int,
                **kw) -> BrownianBundle:
    """Bundle keyed on absolute time so that runs starting at different
    ``t0`` see the same noise at the same absolute step."""
    return generate_brownian(_grid_for(cfg, horizon), paths, coeffs.d, cfg.seed,
                             step_offset=_step_offset(cfg), threads=cfg.threads, **kw)


def _mode_for(coeffs: CoefficientSet, mode: str) -> str:
    if mode == "auto":
        return "gamma2" if coeffs.sigma_depends_on_z else "gamma1"
    if mode == "gamma1" and coeffs.sigma_depends_on_z:
        raise InvalidModeError("gamma1 requires sigma independent of z (k5 = 0)")
    return mode


def window_for(coeffs: CoefficientSet) -> LambdaWindow:
    """Optimal window; forward-decoupled constants use ``gamma = 0``."""
    c = coeffs.constants
    if c.forward_decoupled:
        return lambda_window_optimal(c, gamma=0.0)
    return lambda_window_optimal(c)


# --------------------------------------------------------------------------
# the contraction maps
# --------------------------------------------------------------------------


def gamma2_step(coeffs: CoefficientSet, prev, x0, bundle: BrownianBundle,
                basis: BasisConfig = BasisConfig(), terminal: Optional[Callable] = None,
                group_size: Optional[int] = None):
    """One application of the map freezing ``(Y, Z)``: forward pass with
    ``prev = (Y_bar, Z_bar)``, then the backward solve along the new ``X``.

    Returns
    -------
    (Y, Z) : tuple of ndarray
    """
    _, res = _gamma2(coeffs, prev, x0, bundle, basis, terminal, group_size)
    return res.Y, res.Z


def _gamma2(coeffs, prev, x0, bundle, basis, terminal, group_size):
    fp = forward_paths(coeffs, x0, prev, bundle)
    res = solve_bsde(coeffs, fp.X, terminal, bundle, basis, xi=fp.xi, group_size=group_size)
    return fp, res


def gamma1_step(coeffs: CoefficientSet, prev_X: np.ndarray, x0, bundle: BrownianBundle,
                basis: BasisConfig = BasisConfig(), terminal: Optional[Callable] = None,
                group_size: Optional[int] = None) -> np.ndarray:
    """One application of the map freezing ``X``: backward solve along
    ``prev_X``, then the forward pass driven by the fresh ``(Y, Z)``.

    Raises
    ------
    InvalidModeError
        If ``sigma`` depends on ``z``.
    """
    if coeffs.sigma_depends_on_z:
        raise InvalidModeError("gamma1 requires sigma independent of z (k5 = 0)")
    return _gamma1(coeffs, prev_X, None, x0, bundle, basis, terminal, group_size)[1].X


def _factor_paths(coeffs, bundle):
    if coeffs.factor is None:
        return None
    fac, g = coeffs.factor, bundle.grid
    xi = np.empty((bundle.paths, g.N + 1, fac.q))
    S = fac.initial_state(bundle)
    xi[:, 0] = fac.value(S)
    for i in range(g.N):
        S = fac.advance(bundle, S, i, bundle.increment(i))
        xi[:, i + 1] = fac.value(S)
    return xi


def _gamma1(coeffs, prev_X, xi, x0, bundle, basis, terminal, group_size):
    if xi is None:
        xi = _factor_paths(coeffs, bundle)
    res = solve_bsde(coeffs, prev_X, terminal, bundle, basis, xi=xi, group_size=group_size)
    fp = forward_paths(coeffs, x0, (res.Y, res.Z), bundle)
    return res, fp


# --------------------------------------------------------------------------
# fixed-horizon solve
# --------------------------------------------------------------------------


@dataclass
class _Fixed:
    triple: Optional[PathTriple]
    res: BSDEResult
    iterations: int
    ratios: List[float]
    residuals: List[float]
    converged: bool
    mean_X: np.ndarray
    fast: bool
    divergent_fraction: float
    grid: TimeGrid


def _rel(num, den):
    if den <= 0:
        return 0.0 if num <= 0 else math.inf
    return math.sqrt(num / den)


def _fits(coeffs, cfg, horizon, paths) -> bool:
    if coeffs.decoupled and cfg.fast_decoupled:
        return True
    N = int(round(horizon / cfg.dt))
    per_path = (N + 1) * (coeffs.n + coeffs.m + coeffs.m * coeffs.d) * 8
    return paths * per_path <= cfg.memory_budget


def _solve_fixed(coeffs, x0, cfg: SolveConfig, horizon: float, paths: int,
                 group_size=None, bundle_kw=None, store=None) -> _Fixed:
    bundle_kw = dict(bundle_kw or {})
    if group_size is not None and "group_size" not in bundle_kw:
        bundle_kw["group_size"] = group_size
    grid = _grid_for(cfg, horizon)
    n, m, d = coeffs.n, coeffs.m, coeffs.d
    per_path = (grid.N + 1) * (n + m + m * d) * 8
    fits = paths * per_path <= cfg.memory_budget
    store = fits if store is None else store
    cache = int(min(cfg.memory_budget / 4, 512 * 2 ** 20))
    bundle = make_bundle(coeffs, cfg, horizon, paths, cache_bytes=cache, **bundle_kw)
    basis, lam, term = cfg.basis, cfg.lam, cfg.terminal

    if coeffs.decoupled and cfg.fast_decoupled:
        # b and sigma ignore (y, z): every contraction map is constant, so the
        # first iterate is the fixed point and the second change is exactly 0
        if store:
            fp = forward_paths(coeffs, x0, None, bundle)
            res = solve_bsde(coeffs, fp.X, term, bundle, basis, xi=fp.xi, group_size=group_size)
            triple = PathTriple(fp.X, res.Y, res.Z, grid, fp.xi)
            mean_X, frac = fp.X.mean(axis=0), float(fp.divergent.mean())
        else:
            sf = StreamedForward(coeffs, x0, bundle, cfg.block)
            res = solve_bsde(coeffs, sf, term, bundle, basis, group_size=group_size, store=False)
            triple, mean_X, frac = None, sf.mean_X, float(sf.guard.bad.mean())
        return _Fixed(triple, res, 2, [0.0], [0.0, 0.0], True, mean_X, True, frac, grid)

    if not fits:
        raise InvalidInputError(
            f"coupled solve needs about {2.5 * paths * per_path / 1e9:.1f} GB; "
            "reduce paths, horizon or increase dt")
    mode = _mode_for(coeffs, cfg.mode)
    gm = _gamma_for_metric(coeffs)
    ratios, resid = [], []
    prev_metric = None
    converged = False
    P = paths
    if mode == "gamma2":
        Yb = np.zeros((P, grid.N + 1, m))
        Zb = np.zeros((P, grid.N + 1, m, d))
        for it in range(1, cfg.max_iter + 1):
            fp, res = _gamma2(coeffs, (Yb, Zb), x0, bundle, basis, term, group_size)
            b = weighted_norm_array(res.Y - Yb, grid, lam)
            c = weighted_norm_array(res.Z - Zb, grid, lam)
            metric = b + gm * c
            scale = weighted_norm_array(res.Y, grid, lam) + gm * weighted_norm_array(res.Z, grid, lam)
            if prev_metric is not None:
                ratios.append(metric / prev_metric if prev_metric > 0 else 0.0)
            prev_metric = metric
            resid.append(_rel(metric, scale))
            Yb, Zb = res.Y, res.Z
            if resid[-1] < cfg.tol:
                converged = True
                break
        triple = PathTriple(fp.X, res.Y, res.Z, grid, fp.xi)
        frac = float(fp.divergent.mean())
    else:
        xi = _factor_paths(coeffs, bundle)
        from .simulate import _x0_paths
        Xb = np.repeat(_x0_paths(x0, P, n)[:, None, :], grid.N + 1, axis=1)
        for it in range(1, cfg.max_iter + 1):
            res, fp = _gamma1(coeffs, Xb, xi, x0, bundle, basis, term, group_size)
            a = weighted_norm_array(fp.X - Xb, grid, lam)
            scale = weighted_norm_array(fp.X, grid, lam)
            if prev_metric is not None:
                ratios.append(a / prev_metric if prev_metric > 0 else 0.0)
            prev_metric = a
            resid.append(_rel(a, scale))
            Xb = fp.X
            if resid[-1] < cfg.tol:
                converged = True
                break
        res = solve_bsde(coeffs, Xb, term, bundle, basis, xi=xi, group_size=group_size)
        triple = PathTriple(Xb, res.Y, res.Z, grid, xi)
        frac = float(fp.divergent.mean())
    return _Fixed(triple, res, it, ratios, resid, converged, triple.X.mean(axis=0),
                  False, frac, grid)


# --------------------------------------------------------------------------
# public driver
# --------------------------------------------------------------------------


def _tail_check(cur: _Fixed, dbl: _Fixed, cfg: SolveConfig, horizon: float):
    node = cur.grid.N
    tail = math.exp(cfg.lam * horizon) * float(dbl.res.msq_Y[node])
    y_a, y_b = cur.res.y0, dbl.res.y0
    diff = float(np.max(np.abs(y_a - y_b)))
    dz = cur.res.y0_samples - dbl.res.y0_samples
    se = float(np.max(np.std(dz, axis=0) / math.sqrt(dz.shape[0])))
    scale = 1.0 + float(np.max(np.abs(y_b)))
    ok = tail < cfg.tail_tol and diff <= max(cfg.tol * scale, 2 * se)
    return ok, tail, diff


def solve_fbsde(model, x0, config: SolveConfig = SolveConfig(), *, group_size=None,
                bundle_kw=None, store=None):
    """Solve the coupled system by the contraction iteration.

    Parameters
    ----------
    model : CoefficientSet or ModelSpec
    x0 : array_like
        ``(n,)`` or per-path ``(P, n)`` initial states.
    config : SolveConfig
    group_size : int, optional
        Regress groups of consecutive paths separately (independent solves
        sharing one sweep).
    bundle_kw : dict, optional
        Extra ``BrownianBundle`` options such as ``sharing``.
    store : bool, optional
        Force or forbid keeping full paths (default: when memory allows).

    Returns
    -------
    (PathTriple or None, SolveDiagnostics)
        The triple is ``None`` when paths were streamed or the run diverged.
    """
    coeffs = _coeffs_of(model)
    cfg = config
    if cfg.terminal is None and getattr(model, "terminal", None) is not None:
        cfg = cfg.with_(terminal=model.terminal)
    win = None
    in_win = None
    try:
        win = window_for(coeffs)
        in_win = win.contains(cfg.lam)
    except DecoupledSystemError:
        pass
    fast = coeffs.decoupled and cfg.fast_decoupled
    if in_win is False and not fast:
        warnings.warn(f"lambda={cfg.lam} lies outside the window ({win.lower:.6g}, {win.upper:.6g})",
                      RuntimeWarning, stacklevel=2)
    horizon = cfg.horizon
    history = []
    tail = float("nan")
    notes = []
    try:
        final = None
        if cfg.refine_horizon:
            pp = min(cfg.paths, cfg.pilot_paths)
            if group_size is not None:
                pp = cfg.paths
            cur = _solve_fixed(coeffs, x0, cfg, horizon, pp, group_size, bundle_kw, store=False)
            ok = False
            for _ in range(cfg.max_doublings + 1):
                if not _fits(coeffs, cfg, 2 * horizon, pp):
                    notes.append("memory budget reached before the tail rule held")
                    break
                dbl = _solve_fixed(coeffs, x0, cfg, 2 * horizon, pp, group_size, bundle_kw, store=False)
                ok, tail, diff = _tail_check(cur, dbl, cfg, horizon)
                history.append((horizon, float(np.max(cur.res.y0)), tail, diff))
                if ok:
                    break
                horizon *= 2
                cur = dbl
            if not ok:
                notes.append("tail rule not met within max_doublings")
            if pp == cfg.paths and store is False:
                final = cur
        if final is None:
            final = _solve_fixed(coeffs, x0, cfg, horizon, cfg.paths, group_size, bundle_kw, store)
    except DivergenceError as e:
        diag = SolveDiagnostics(0, [], math.inf, horizon, False, window=win,
                                lambda_in_window=in_win, diverged=True,
                                divergent_fraction=e.fraction, horizon_history=history,
                                notes=[str(e)])
        return None, diag
    res = final.res
    converged = final.converged and not (cfg.refine_horizon and notes)
    diag = SolveDiagnostics(
        iterations=final.iterations, contraction_ratios=final.ratios,
        final_residual=final.residuals[-1], horizon_used=horizon, converged=converged,
        mode="decoupled" if final.fast else _mode_for(coeffs, cfg.mode),
        y0=res.y0, y0_se=res.y0_se, y0_samples=res.y0_samples, tail=tail, window=win,
        lambda_in_window=in_win, decoupled_fast_path=final.fast,
        divergent_fraction=final.divergent_fraction, horizon_history=history,
        ridge_events=len(res.ridge_events), residuals=final.residuals, grid=final.grid,
        mean_X=final.mean_X, mean_Y=res.mean_Y, mean_Z=res.mean_Z, msq_Y=res.msq_Y,
        y_se=res.y_se, z_se=res.z_se, notes=notes)
    return final.triple, diag


# --------------------------------------------------------------------------
# statistical harnesses
# --------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    y1: float
    y2: float
    difference: float
    se: float
    passed: bool
    spot_check_ok: bool
    horizon: float


def _spot_check(c1: CoefficientSet, c2: CoefficientSet, n: int = 1000, seed: int = 0,
                box=(-2.0, 2.0)) -> bool:
    rng = np.random.default_rng(seed)
    x = rng.uniform(*box, size=(n, c1.n))
    y = rng.uniform(*box, size=(n, 1))
    z = rng.uniform(*box, size=(n, 1, c1.d))
    xi = rng.uniform(*box, size=(n, c1.factor.q)) if c1.factor is not None else None
    t = float(rng.uniform(0, 1))
    tol = 1e-12
    return bool(np.all(c1.eval_b(t, x, y, z, xi) >= c2.eval_b(t, x, y, z, xi) - tol)
                and np.all(c1.eval_f(t, x, y, z, xi) >= c2.eval_f(t, x, y, z, xi) - tol))


def comparison_harness(model1, model2, x0, config: SolveConfig = SolveConfig()) -> ComparisonReport:
    """Solve two one-dimensional systems on the same bundle and test
    ``Y1(0) >= Y2(0) - 3 SE``.

    ``b1 >= b2`` and ``f1 >= f2`` are spot-checked on 1000 random points; the
    result is recorded, not enforced.
    """
    c1, c2 = _coeffs_of(model1), _coeffs_of(model2)
    if c1.m != 1 or c2.m != 1:
        raise InvalidInputError("comparison needs a one-dimensional backward component")
    if (c1.n, c1.d) != (c2.n, c2.d):
        raise InvalidInputError("models must share state and noise dimensions")
    spot = _spot_check(c1, c2)
    horizon = config.horizon
    if config.refine_horizon:
        h = []
        for mdl in (model1, model2):
            _, dg = solve_fbsde(mdl, x0, config.with_(paths=min(config.paths, config.pilot_paths)))
            h.append(dg.horizon_used)
        horizon = max(h)
    cfg = config.with_(horizon=horizon, refine_horizon=False)
    _, d1 = solve_fbsde(model1, x0, cfg, store=False)
    _, d2 = solve_fbsde(model2, x0, cfg, store=False)
    if d1.diverged or d2.diverged:
        raise DivergenceError("a comparison solve diverged")
    y1, y2 = float(d1.y0[0, 0]), float(d2.y0[0, 0])
    dz = d1.y0_samples[:, 0] - d2.y0_samples[:, 0]
    se = float(np.std(dz, ddof=1) / math.sqrt(dz.size)) if dz.size > 1 else 0.0
    diff = y1 - y2
    return ComparisonReport(y1, y2, diff, se, bool(diff >= -3 * se), spot, horizon)


@dataclass
class SensitivityReport:
    dx: List[float]
    dt0: List[float]
    sup_dX: List[float]
    sup_dY: List[float]
    norm_dZ: List[float]
    ratios: List[float]
    slope_dx: float
    slope_dt0: float
    fitted_C: float
    bound_factor: float
    passed: bool
    dt0_sup_dX: List[float] = field(default_factory=list)
    dt0_sup_dY: List[float] = field(default_factory=list)
    dt0_norm_dZ: List[float] = field(default_factory=list)


def _slope(h, v):
    h, v = np.asarray(h, float), np.asarray(v, float)
    ok = (h > 0) & (v > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[ok]), np.log(v[ok]), 1)[0])


def _differences(a: PathTriple, b: PathTriple, lam: float, offset: int = 0):
    """Weighted sup-differences on the common nodes; ``b`` starts ``offset``
    nodes after ``a``."""
    t = a.grid.times()[offset:]
    w = np.exp(lam * t)[None, :]
    dX = np.sum((a.X[:, offset:] - b.X[:, : a.X.shape[1] - offset]) ** 2, axis=2)
    dY = np.sum((a.Y[:, offset:] - b.Y[:, : a.Y.shape[1] - offset]) ** 2, axis=2)
    dZ = (a.Z[:, offset:] - b.Z[:, : a.Z.shape[1] - offset])
    sx = float(np.mean(np.max(w * dX, axis=1)))
    sy = float(np.mean(np.max(w * dY, axis=1)))
    dz2 = np.sum(dZ.reshape(dZ.shape[0], dZ.shape[1], -1) ** 2, axis=2)[:, :-1]
    nz = float(np.mean(dz2 @ (np.exp(lam * t[:-1]) * a.grid.dt)))
    return sx, sy, nz


def sensitivity_harness(model, x0, dx: Sequence[float] = (0.1, 0.05, 0.025),
                        dt0: Sequence[float] = (), config: SolveConfig = SolveConfig(),
                        bound_factor: float = 4.0) -> SensitivityReport:
    """Continuous dependence on the initial data on common noise.

    For each ``dx`` the system is solved from ``x0`` and ``x0 + dx`` (first
    coordinate); for each ``dt0`` from ``(t0, x0)`` and ``(t0 + dt0, x0)``.
    Reports ``E sup_t e^{lam t}|dX|^2``, ``E sup_t e^{lam t}|dY|^2`` and the
    weighted norm of ``dZ``, the log-log slope of the ``dY`` quantity, and
    the ratios of the summed left side to
    ``|x1-x2|^2 + (1 + |x1|^2 v |x2|^2)|t1-t2|``. The constant ``C`` is
    fitted on the largest perturbation of each family (the larger of the two
    ratios); ``passed`` requires the ``dx`` slope in ``[1.7, 2.3]`` and every
    ratio at most ``C * bound_factor``, so ratios may not grow as the
    perturbations shrink.
    """
    coeffs = _coeffs_of(model)
    x0 = np.asarray(x0, float).reshape(-1)
    cfg = config
    if cfg.refine_horizon:
        _, dg = solve_fbsde(model, x0, cfg.with_(paths=min(cfg.paths, cfg.pilot_paths)))
        cfg = cfg.with_(horizon=dg.horizon_used)
    cfg = cfg.with_(refine_horizon=False)
    base, _ = solve_fbsde(model, x0, cfg, store=True)
    sx, sy, nz, ratios = [], [], [], []
    for h in dx:
        x1 = x0.copy()
        x1[0] += h
        other, _ = solve_fbsde(model, x1, cfg, store=True)
        a, b, c = _differences(other, base, cfg.lam)
        sx.append(a), sy.append(b), nz.append(c)
        den = h ** 2
        ratios.append((a + b + c) / den if den > 0 else 0.0)
    tx, ty, tz = [], [], []
    for h in dt0:
        k = int(round(h / cfg.dt))
        c2 = cfg.with_(t0=cfg.t0 + k * cfg.dt, horizon=cfg.horizon - k * cfg.dt)
        other, _ = solve_fbsde(model, x0, c2, store=True)
        a, b, c = _differences(base, other, cfg.lam, offset=k)
        tx.append(a), ty.append(b), tz.append(c)
        den = (1 + float(x0 @ x0)) * k * cfg.dt
        ratios.append((a + b + c) / den if den > 0 else 0.0)
    pos = [r for r in ratios if r > 0]
    heads = [ratios[0]] if dx else []
    if dt0:
        heads.append(ratios[len(dx)])
    C = max(heads) if heads else 0.0
    slope = _slope(dx, sy)
    slope_t = _slope(dt0, [a + b + c for a, b, c in zip(tx, ty, tz)]) if dt0 else float("nan")
    bounded = all(r <= C * bound_factor for r in pos)
    ok_slope = (1.7 <= slope <= 2.3) if len(dx) >= 2 else True
    return SensitivityReport(list(dx), list(dt0), sx, sy, nz, ratios, slope, slope_t, C,
                             bound_factor, bool(ok_slope and bounded), tx, ty, tz)
