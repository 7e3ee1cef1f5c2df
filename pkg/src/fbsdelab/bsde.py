"""Regression-based backward solver for ``dY = -f dt + Z dW``.

Conditional expectations given the state at ``t_i`` are least-squares fits on
a total-degree polynomial basis of the standardised regressors (the forward
state and, for random coefficients, the factor values). Paths may be split
into groups of equal size that are regressed separately, which lets several
independent solves (lattice nodes, noise realisations) share one sweep.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .core import BrownianBundle, CoefficientSet, TimeGrid
from .errors import InvalidInputError, RegressionError

RIDGE_FALLBACK = 1e-4


@dataclass(frozen=True)
class BasisConfig:
    """Polynomial regression basis: total ``degree`` and ridge weight."""

    degree: int = 2
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0 or self.ridge < 0:
            raise InvalidInputError("basis degree and ridge must be nonnegative")


class Regressor:
    """Grouped least-squares projection onto a polynomial basis."""

    def __init__(self, basis: BasisConfig, paths: int, group_size: Optional[int] = None):
        self.basis = basis
        self.P = paths
        self.gs = group_size or paths
        if paths % self.gs:
            raise InvalidInputError("group size must divide the path count")
        self.G = paths // self.gs
        self.ridge_events: List[tuple] = []
        self._terms = None

    def _monomials(self, q):
        if self._terms is None or self._terms[0] != q:
            terms = [c for k in range(1, self.basis.degree + 1)
                     for c in itertools.combinations_with_replacement(range(q), k)]
            self._terms = (q, terms)
        return self._terms[1]

    def design(self, s: np.ndarray):
        """Standardise regressors per group and build the design tensor
        ``(G, gs, K)``. Returns the tensor and the standardisation."""
        s = s.reshape(self.G, self.gs, -1)
        mu = s.mean(axis=1, keepdims=True)
        sd = s.std(axis=1, keepdims=True)
        flat = sd <= 1e-12 * (1.0 + np.abs(mu))
        sd = np.where(flat, 1.0, sd)
        u = np.where(flat, 0.0, (s - mu) / sd)
        cols = [np.ones(u.shape[:2])]
        for term in self._monomials(u.shape[2]):
            c = u[:, :, term[0]]
            for j in term[1:]:
                c = c * u[:, :, j]
            cols.append(c)
        return np.stack(cols, axis=2), (mu, sd, flat)

    def gram(self, D: np.ndarray, step: int = -1) -> np.ndarray:
        """Inverse of the ridged normal matrix per group ``(G, K, K)``,
        reusable for several targets on the same design."""
        K = D.shape[2]
        A = np.swapaxes(D, 1, 2) @ D / self.gs
        ridge = self.basis.ridge
        for attempt in range(2):
            try:
                inv = np.linalg.inv(A + ridge * np.eye(K))
                if np.all(np.isfinite(inv)):
                    return inv
            except np.linalg.LinAlgError:
                pass
            if attempt == 1:
                raise RegressionError(f"regression singular at step {step} even with ridge {ridge}")
            ridge = max(RIDGE_FALLBACK, 10 * ridge)
            self.ridge_events.append((step, ridge))

    def fit(self, D: np.ndarray, targets: np.ndarray, step: int = -1,
            inv: Optional[np.ndarray] = None):
        """Fitted values ``(P, r)`` and coefficients ``(G, K, r)``."""
        r = targets.shape[-1]
        T = targets.reshape(self.G, self.gs, r)
        if inv is None:
            inv = self.gram(D, step)
        coef = inv @ (np.swapaxes(D, 1, 2) @ T / self.gs)
        return (D @ coef).reshape(self.P, r), coef


@dataclass
class BSDEResult:
    """Backward solution. ``Y``/``Z`` are ``None`` when not stored."""

    Y: Optional[np.ndarray]
    Z: Optional[np.ndarray]
    y0: np.ndarray
    y0_se: np.ndarray
    y0_samples: np.ndarray
    mean_Y: np.ndarray
    mean_Z: np.ndarray
    msq_Y: np.ndarray
    y_se: np.ndarray
    z_se: np.ndarray
    ridge_events: list
    fits: Optional[list] = None
    Y_T: Optional[np.ndarray] = None

    def __iter__(self):
        yield self.Y
        yield self.Z


def backward_sweep(grid: TimeGrid, paths: int, m: int, d: int,
                   state_at: Callable, dW_at: Callable, driver: Callable,
                   terminal: np.ndarray, basis: BasisConfig = BasisConfig(),
                   group_size: Optional[int] = None, store: bool = True,
                   keep_fits: bool = False) -> BSDEResult:
    """Generic regression sweep from ``t_N`` down to ``t_0``.

    Parameters
    ----------
    state_at : callable
        ``i -> (P, q)`` regressors at node ``i``.
    dW_at : callable
        ``i -> (P, d)`` increments of step ``i``.
    driver : callable
        ``(i, y, z) -> (P, m)`` driver values at node ``i``.
    terminal : ndarray
        ``Y(t_N)`` with shape ``(P, m)``.

    Notes
    -----
    ``Z(t_i)`` is the fitted ``E[(Y_{i+1} - E_i Y_{i+1}) dW_i] / dt`` (the
    centred target removes most of the variance). ``Y(t_i)`` uses one
    predictor-corrector pass on the implicit ``y`` argument of the driver.
    ``y0_samples`` holds ``Y(t_N) + sum_i f_i dt`` per path, an unbiased
    pathwise estimate of ``Y(t_0)`` used for standard errors.
    """
    N, dt, P = grid.N, grid.dt, paths
    reg = Regressor(basis, P, group_size)
    y = np.array(np.broadcast_to(terminal, (P, m)), dtype=float)
    Y = Z = None
    if store:
        Y = np.empty((P, N + 1, m))
        Z = np.empty((P, N + 1, m, d))
        Y[:, N] = y
    mean_Y = np.empty((N + 1, m))
    mean_Z = np.empty((N + 1, m, d))
    y_se = np.zeros((N + 1, m))
    z_se = np.zeros((N + 1, m, d))
    msq_Y = np.empty(N + 1)
    mean_Y[N] = y.mean(axis=0)
    msq_Y[N] = np.mean(np.sum(y ** 2, axis=1))
    zeta = y.copy()
    fits = [None] * N if keep_fits else None
    z = np.zeros((P, m, d))
    for i in range(N - 1, -1, -1):
        D, std = reg.design(state_at(i))
        dW = dW_at(i)
        inv = reg.gram(D, i)
        ey, cy = reg.fit(D, y, i, inv)
        resid = y - ey
        tz = (resid[:, :, None] * dW[:, None, :]).reshape(P, m * d) / dt
        ez, _ = reg.fit(D, tz, i, inv)
        z = ez.reshape(P, m, d)
        pred = ey + driver(i, ey, z) * dt
        fval = driver(i, pred, z)
        y = ey + fval * dt
        zeta += fval * dt
        if keep_fits:
            fits[i] = (std, cy)
        if store:
            Y[:, i] = y
            Z[:, i] = z
        mean_Y[i] = y.mean(axis=0)
        msq_Y[i] = np.mean(np.sum(y ** 2, axis=1))
        mean_Z[i] = z.mean(axis=0)
        y_se[i] = np.std(resid, axis=0) / math.sqrt(reg.gs)
        z_se[i] = (np.std(tz - ez, axis=0) / math.sqrt(reg.gs)).reshape(m, d)
    if store:
        Z[:, N] = Z[:, N - 1]
    mean_Z[N] = mean_Z[N - 1]
    G, gs = reg.G, reg.gs
    y0 = y.reshape(G, gs, m).mean(axis=1)
    zg = zeta.reshape(G, gs, m)
    y0_se = zg.std(axis=1, ddof=1) / math.sqrt(gs) if gs > 1 else np.zeros((G, m))
    return BSDEResult(Y, Z, y0, y0_se, zeta, mean_Y, mean_Z, msq_Y, y_se, z_se,
                      reg.ridge_events, fits)


def _terminal_values(terminal, T, x):
    if terminal is None:
        return None
    return np.asarray(terminal(T, x), dtype=float)


def solve_bsde(coeffs: CoefficientSet, X, terminal: Optional[Callable], bundle: BrownianBundle,
               basis: BasisConfig = BasisConfig(), *, xi: Optional[np.ndarray] = None,
               group_size: Optional[int] = None, store: bool = True,
               keep_fits: bool = False) -> BSDEResult:
    """Solve the BSDE with driver ``coeffs.f`` along frozen forward paths.

    Parameters
    ----------
    X : ndarray or forward source
        Either ``(P, N+1, n)`` paths or an object with ``state(i)`` returning
        ``(X_i, xi_i)`` (for example ``StreamedForward``).
    terminal : callable or None
        ``Phi(T, x) -> (P, m)``; ``None`` means ``Y(T) = 0``.
    xi : ndarray, optional
        Factor values ``(P, N+1, q)`` when ``X`` is an array.
    """
    g, P, m, d = bundle.grid, bundle.paths, coeffs.m, coeffs.d
    if isinstance(X, np.ndarray):
        if X.shape[:2] != (P, g.N + 1):
            raise InvalidInputError("X must cover the full grid for every bundle path")

        def state(i):
            return X[:, i], (None if xi is None else xi[:, i])

        dW_at = bundle.increment
    else:
        state = X.state
        dW_at = getattr(X, "increment", bundle.increment)

    def regressors(i):
        x, f = state(i)
        return x if f is None else np.concatenate([x, f], axis=1)

    def driver(i, y, z):
        x, f = state(i)
        return coeffs.eval_f(g.node(i), x, y, z, f)

    xT = state(g.N)[0]
    phi = _terminal_values(terminal, g.T, xT)
    term = np.zeros((P, m)) if phi is None else np.broadcast_to(phi, (P, m))
    res = backward_sweep(g, P, m, d, regressors, dW_at, driver, term, basis,
                         group_size, store, keep_fits)
    res.Y_T = np.array(term)
    return res
