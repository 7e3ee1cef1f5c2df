"""Representing field ``v(t, x) = Y_{t,x}(t)``, decoupling and Z-consistency
checks, the stationarity test and the change-of-variable (IKW) validator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import ks_2samp

from .core import CoefficientSet, PathTriple, TimeGrid
from .errors import CoverageError, InvalidInputError, InvalidModeError
from .picard import SolveConfig, solve_fbsde
from .simulate import generate_brownian

COVERAGE_LIMIT = 0.05


def _coeffs(model) -> CoefficientSet:
    return getattr(model, "coeffs", model)


def _steps(t: float, dt: float) -> int:
    k = int(round(t / dt))
    if k < 0 or abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise InvalidInputError(f"time {t} is not a nonnegative multiple of dt={dt}")
    return k


@dataclass
class RepresentingField:
    """Tabulated field on ``t_nodes x x_nodes[0] x ... x x_nodes[n-1]``.

    ``values`` has shape ``(T, L_1, ..., L_n, m)``, or ``(R, T, L_1, ...,
    L_n, m)`` with one slice per noise realization for random coefficients.
    ``gradient`` appends an axis of length ``n`` (central differences).
    ``mask`` flags non-converged node solves.
    """

    t_nodes: np.ndarray
    x_nodes: List[np.ndarray]
    values: np.ndarray
    gradient: np.ndarray
    se: np.ndarray
    mask: np.ndarray
    horizon_end: float
    meta: dict = field(default_factory=dict)

    @property
    def random(self) -> bool:
        return self.values.ndim == len(self.x_nodes) + 3

    def lattice_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.x_nodes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def _interp(self, table, t_index, x, count):
        lo = np.array([a[0] for a in self.x_nodes])
        hi = np.array([a[-1] for a in self.x_nodes])
        out = np.any((x < lo) | (x > hi), axis=1)
        xc = np.clip(x, lo, hi)
        tab = table[t_index]
        shape = tab.shape[len(self.x_nodes):]
        flat = tab.reshape(tab.shape[: len(self.x_nodes)] + (-1,))
        f = RegularGridInterpolator(tuple(self.x_nodes), flat, method="linear")
        vals = f(xc).reshape((x.shape[0],) + shape)
        if count is not None:
            count.append(out)
        return vals

    def value_at(self, t_index: int, x: np.ndarray, count: Optional[list] = None) -> np.ndarray:
        """Multilinear interpolation of ``v(t_nodes[t_index], x)`` for ``x``
        of shape ``(P, n)``; off-lattice points are clipped and recorded in
        ``count``."""
        if self.random:
            raise InvalidModeError("pick a realization of a random field first")
        return self._interp(self.values, t_index, x, count)

    def gradient_at(self, t_index: int, x: np.ndarray) -> np.ndarray:
        """Interpolated ``grad_x v`` with shape ``(P, m, n)``."""
        if self.random:
            raise InvalidModeError("pick a realization of a random field first")
        return self._interp(self.gradient, t_index, x, None)


def _grad(values: np.ndarray, x_nodes, lead: int) -> np.ndarray:
    n = len(x_nodes)
    comps = []
    for k in range(n):
        ax = lead + k
        if values.shape[ax] < 2:
            comps.append(np.zeros_like(values))
        else:
            comps.append(np.gradient(values, x_nodes[k], axis=ax, edge_order=2
                                     if values.shape[ax] > 2 else 1))
    return np.stack(comps, axis=-1)


def build_field(model, t_nodes: Sequence[float], x_lattice: Sequence[Sequence[float]],
                config: SolveConfig, *, horizon_end: float, group_paths: int = 256,
                realizations: int = 1) -> RepresentingField:
    """Tabulate ``v(t, x) = Y_{t,x}(t)`` by grouped solves.

    One solve per time node covers the whole lattice: path group ``l``
    starts at lattice point ``l``. Every solve uses the truncation end
    ``horizon_end`` and the model's terminal condition, so ``v`` is the
    field of the same truncated system that ``decoupling_residual`` solves.

    With deterministic coefficients all groups share the same noise and the
    table is a Monte Carlo average. With random coefficients the noise past
    is shared per realization (``realizations`` of them) and the table has a
    leading realization axis.
    """
    coeffs = _coeffs(model)
    x_nodes = [np.asarray(a, float) for a in x_lattice]
    if len(x_nodes) != coeffs.n or any(a.ndim != 1 or a.size < 1 for a in x_nodes):
        raise InvalidInputError("x_lattice must list one 1-d node array per state dimension")
    if any(np.any(np.diff(a) <= 0) for a in x_nodes):
        raise InvalidInputError("lattice nodes must be strictly increasing")
    t_nodes = np.asarray(t_nodes, float)
    dt = config.dt
    for t in t_nodes:
        _steps(t, dt)
    if np.any(t_nodes >= horizon_end):
        raise InvalidInputError("time nodes must lie before horizon_end")
    mesh = np.meshgrid(*x_nodes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    L = pts.shape[0]
    random = coeffs.factor is not None and not coeffs.deterministic_coefficients
    R = realizations if random else 1
    gs = group_paths
    vals = np.empty((R, t_nodes.size, L, coeffs.m))
    ses = np.empty_like(vals)
    mask = np.zeros((t_nodes.size,), dtype=bool)
    for j, t in enumerate(t_nodes):
        cfg = config.with_(t0=float(t), horizon=horizon_end - float(t), refine_horizon=False,
                           paths=R * L * gs)
        x0 = np.repeat(np.tile(pts, (R, 1)), gs, axis=0)
        if random:
            kw = dict(group_size=L * gs, sharing="shared_past", shared_before=_steps(t, dt))
        else:
            kw = dict(group_size=gs, sharing="replicate")
        _, diag = solve_fbsde(model, x0, cfg, group_size=gs, bundle_kw=kw, store=False)
        if diag.diverged or diag.y0 is None:
            mask[j] = True
            vals[:, j] = np.nan
            ses[:, j] = np.nan
            continue
        mask[j] = not diag.converged
        vals[:, j] = diag.y0.reshape(R, L, coeffs.m)
        ses[:, j] = diag.y0_se.reshape(R, L, coeffs.m)
    shape = tuple(a.size for a in x_nodes)
    vals = vals.reshape((R, t_nodes.size) + shape + (coeffs.m,))
    ses = ses.reshape(vals.shape)
    if not random:
        vals, ses = vals[0], ses[0]
    lead = 2 if random else 1
    grad = _grad(vals, x_nodes, lead)
    meta = dict(config=config, group_paths=gs, realizations=R, model=getattr(model, "name", ""))
    return RepresentingField(t_nodes, x_nodes, vals, grad, ses, mask, float(horizon_end), meta)


def _on_grid(fld: RepresentingField, grid: TimeGrid):
    idx = []
    for j, t in enumerate(fld.t_nodes):
        i = int(round((t - grid.t0) / grid.dt))
        if 0 <= i <= grid.N and abs(grid.node(i) - t) < 1e-9 * max(1.0, abs(t)):
            idx.append((j, i))
    if not idx:
        raise InvalidInputError("no field time node lies on the solution grid")
    return idx


def _solve_on(model, fld: RepresentingField, config: SolveConfig, x0) -> PathTriple:
    t0 = float(fld.t_nodes[0])
    cfg = config.with_(t0=t0, horizon=fld.horizon_end - t0, refine_horizon=False)
    triple, diag = solve_fbsde(model, x0, cfg, store=True)
    if triple is None:
        raise InvalidInputError("the reference solve diverged")
    return triple


def coverage_fraction(fld: RepresentingField, X: np.ndarray) -> float:
    """Fraction of path-time points of ``X`` ``(P, K, n)`` outside the lattice."""
    lo = np.array([a[0] for a in fld.x_nodes])
    hi = np.array([a[-1] for a in fld.x_nodes])
    return float(np.mean(np.any((X < lo) | (X > hi), axis=-1)))


def decoupling_residual(model, fld: RepresentingField, config: SolveConfig, x0=None,
                        solution: Optional[PathTriple] = None) -> float:
    """``max_s E|Y(s) - v(s, X(s))|^2 / (1 + E|Y(s)|^2)`` over the field's
    time nodes, for one solve started at ``(t_nodes[0], x0)``.

    Raises
    ------
    CoverageError
        If more than 5% of path-time points fall outside the lattice.
    InvalidModeError
        For random fields (``v`` would have to be matched per realization).
    """
    if fld.random:
        raise InvalidModeError("decoupling residual needs a deterministic field")
    if solution is None:
        x0 = getattr(model, "x0", None) if x0 is None else x0
        solution = _solve_on(model, fld, config, x0)
    pairs = _on_grid(fld, solution.grid)
    Xs = np.stack([solution.X[:, i] for _, i in pairs], axis=1)
    cov = coverage_fraction(fld, Xs)
    if cov > COVERAGE_LIMIT:
        raise CoverageError(f"{cov:.1%} of path-time points fall outside the field lattice")
    worst = 0.0
    for j, i in pairs:
        v = fld.value_at(j, solution.X[:, i])
        y = solution.Y[:, i]
        num = float(np.mean(np.sum((y - v) ** 2, axis=1)))
        den = 1.0 + float(np.mean(np.sum(y ** 2, axis=1)))
        worst = max(worst, num / den)
    return worst


def z_consistency_residual(model, fld: RepresentingField, solution: PathTriple) -> float:
    """Mean over the field's time nodes (excluding the truncation end) of
    ``E|Z - grad v sigma(., v)|^2 / E|grad v sigma|^2``; when the prediction
    vanishes identically the unnormalised mean square is returned.

    Raises
    ------
    InvalidModeError
        For random coefficients, whose field martingale part is unobservable.
    """
    coeffs = _coeffs(model)
    if not coeffs.deterministic_coefficients or fld.random:
        raise InvalidModeError("Z-consistency is limited to deterministic coefficients")
    pairs = [(j, i) for j, i in _on_grid(fld, solution.grid) if i < solution.grid.N]
    num = den = 0.0
    for j, i in pairs:
        x = solution.X[:, i]
        t = solution.grid.node(i)
        v = fld.value_at(j, x)
        gv = fld.gradient_at(j, x)
        zero_z = np.zeros((x.shape[0], coeffs.m, coeffs.d))
        sig = coeffs.eval_sigma(t, x, v, zero_z)
        pred = np.einsum("pmn,pnd->pmd", gv, sig)
        num += float(np.mean(np.sum((solution.Z[:, i] - pred) ** 2, axis=(1, 2))))
        den += float(np.mean(np.sum(pred ** 2, axis=(1, 2))))
    if den <= 1e-14 * max(num, 1.0):
        return num / len(pairs)
    return num / den


# --------------------------------------------------------------------------
# stationarity
# --------------------------------------------------------------------------


@dataclass
class StationarityReport:
    ks_stat: float
    p_value: float
    sample_t: np.ndarray
    sample_shifted: np.ndarray
    passed: bool


def field_samples(model, t: float, x, samples: int, config: SolveConfig, *,
                  horizon: float, group_paths: int = 64) -> np.ndarray:
    """``samples`` draws of ``v(t, x)``: path groups share the noise before
    ``t`` and are independent across groups; each group's regression value
    at ``t`` is one draw."""
    coeffs = _coeffs(model)
    dt = config.dt
    k = _steps(t, dt)
    P = samples * group_paths
    cfg = config.with_(t0=float(t), horizon=horizon, refine_horizon=False, paths=P)
    kw = dict(group_size=group_paths, sharing="shared_past", shared_before=k)
    x0 = np.broadcast_to(np.asarray(x, float).reshape(1, -1), (P, coeffs.n))
    _, diag = solve_fbsde(model, x0, cfg, group_size=group_paths, bundle_kw=kw, store=False)
    if diag.y0 is None:
        raise InvalidInputError("stationarity solve diverged")
    return diag.y0[:, 0].copy()


def stationarity_test(model, t: float, alpha: float, x, samples: int, config: SolveConfig, *,
                      horizon: float = 40.0, group_paths: int = 64, level: float = 0.01,
                      allow_nonautonomous: bool = False) -> StationarityReport:
    """Two-sample Kolmogorov-Smirnov test of ``v(t, x)`` against
    ``v(t + alpha, x)``.

    Both solves use the same relative horizon. Noise is keyed by absolute
    time, so the second solve runs on ``shift(bundle, alpha)`` of the first.

    Raises
    ------
    InvalidModeError
        For non-autonomous models unless ``allow_nonautonomous`` (used to
        demonstrate the test's power on a deliberately inhomogeneous model).
    """
    coeffs = _coeffs(model)
    if not coeffs.autonomous and not allow_nonautonomous:
        raise InvalidModeError("stationarity needs an autonomous model")
    _steps(alpha, config.dt)
    a = field_samples(model, t, x, samples, config, horizon=horizon, group_paths=group_paths)
    b = field_samples(model, t + alpha, x, samples, config, horizon=horizon,
                      group_paths=group_paths)
    if np.ptp(np.concatenate([a, b])) == 0:
        return StationarityReport(0.0, 1.0, a, b, True)
    res = ks_2samp(a, b)
    return StationarityReport(float(res.statistic), float(res.pvalue), a, b,
                              bool(res.pvalue > level))


# --------------------------------------------------------------------------
# change of variables for random fields
# --------------------------------------------------------------------------


@dataclass
class IKWCase:
    """Random field ``F(t, x, w)`` of a scalar Brownian ``w = W(t)`` with its
    decomposition and derivatives, and a semimartingale ``X``.

    Evaluators take ``(t, x, w)`` with ``x`` of shape ``(P, n)`` and ``w`` of
    shape ``(P, d)``. Shapes: ``F``, ``A_F`` -> ``(P,)``; ``Psi_F`` ->
    ``(P, d)``; ``grad_F`` -> ``(P, n)``; ``hess_F`` -> ``(P, n, n)``;
    ``grad_Psi_F`` -> ``(P, n, d)``; ``A_X`` -> ``(P, n)``; ``Psi_X`` ->
    ``(P, n, d)``.
    """

    name: str
    F: Callable
    A_F: Callable
    Psi_F: Callable
    grad_F: Callable
    hess_F: Callable
    grad_Psi_F: Callable
    A_X: Callable
    Psi_X: Callable
    x0: float = 0.0
    n: int = 1
    d: int = 1


_REQUIRED = ("F", "A_F", "Psi_F", "grad_F", "hess_F", "grad_Psi_F", "A_X", "Psi_X")


def _zeros_n(t, x, w):
    return np.zeros(x.shape)


def ikw_cases() -> List[IKWCase]:
    """The three polynomial cases: ``F = x``, ``F = x^2`` and ``F = W(t) x``,
    each with ``X = W``."""
    one = lambda t, x, w: np.ones(x.shape + (1,))
    zero_p = lambda t, x, w: np.zeros(x.shape[0])
    zero_pd = lambda t, x, w: np.zeros((x.shape[0], 1))
    zero_nn = lambda t, x, w: np.zeros((x.shape[0], 1, 1))
    return [
        IKWCase("F=x", lambda t, x, w: x[:, 0], zero_p, zero_pd,
                lambda t, x, w: np.ones(x.shape), zero_nn, zero_nn, _zeros_n, one),
        IKWCase("F=x^2", lambda t, x, w: x[:, 0] ** 2, zero_p, zero_pd,
                lambda t, x, w: 2 * x, lambda t, x, w: np.full((x.shape[0], 1, 1), 2.0),
                zero_nn, _zeros_n, one),
        IKWCase("F=W(t)x", lambda t, x, w: w[:, 0] * x[:, 0], zero_p,
                lambda t, x, w: x.copy(), lambda t, x, w: w.copy(), zero_nn,
                lambda t, x, w: np.ones((x.shape[0], 1, 1)), _zeros_n, one),
    ]


def ikw_residual(case: IKWCase, grid: TimeGrid, paths: int = 20_000, seed: int = 0) -> float:
    """``max_i E|LHS(t_i) - RHS(t_i)|^2`` between ``F(t, X(t))`` and its
    discretised decomposition (left-endpoint Ito sums, Euler ``X``).

    Raises
    ------
    InvalidInputError
        If a decomposition term is missing.
    """
    missing = [k for k in _REQUIRED if getattr(case, k, None) is None]
    if missing:
        raise InvalidInputError(f"IKW case lacks {', '.join(missing)}")
    bundle = generate_brownian(grid, paths, case.d, seed)
    P, n, dt = paths, case.n, grid.dt
    x = np.full((P, n), float(case.x0))
    w = np.zeros((P, case.d))
    t = grid.t0
    rhs = np.asarray(case.F(t, x, w), float).copy()
    worst = 0.0
    for i in range(grid.N):
        t = grid.node(i)
        dW = bundle.increment(i)
        ax = case.A_X(t, x, w)
        px = case.Psi_X(t, x, w)
        gf = case.grad_F(t, x, w)
        drift = (case.A_F(t, x, w) + np.sum(ax * gf, axis=1)
                 + 0.5 * np.einsum("pid,pjd,pij->p", px, px, case.hess_F(t, x, w))
                 + np.einsum("pid,pid->p", case.grad_Psi_F(t, x, w), px))
        mart = np.sum(case.Psi_F(t, x, w) * dW, axis=1) + np.einsum("pi,pid,pd->p", gf, px, dW)
        rhs = rhs + drift * dt + mart
        x = x + ax * dt + np.einsum("pid,pd->pi", px, dW)
        w = w + dW
        lhs = np.asarray(case.F(grid.node(i + 1), x, w), float)
        worst = max(worst, float(np.mean((lhs - rhs) ** 2)))
    return worst


def loglog_slope(h: Sequence[float], v: Sequence[float]) -> float:
    """Least-squares slope of ``log v`` against ``log h``; ``nan`` unless
    every value is positive."""
    h, v = np.asarray(h, float), np.asarray(v, float)
    if np.any(v <= 0) or h.size < 2:
        return float("nan")
    return float(np.polyfit(np.log(h), np.log(v), 1)[0])
