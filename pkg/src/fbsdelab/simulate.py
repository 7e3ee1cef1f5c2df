"""Brownian bundle generation, the shift operator and Euler-Maruyama forward
integration (in memory or streamed from checkpoints)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .core import BrownianBundle, CoefficientSet, PathTriple, TimeGrid
from .errors import DivergenceError, InvalidInputError

DIVERGENCE_LEVEL = 1e12
DIVERGENCE_FRACTION = 1e-3


def generate_brownian(grid: TimeGrid, paths: int, d: int, seed: int, **kw) -> BrownianBundle:
    """Counter-based Brownian increments; see ``BrownianBundle`` for options."""
    if paths < 1 or grid.N < 1 or d < 1:
        raise InvalidInputError("paths, steps and d must be positive")
    return BrownianBundle(grid, paths, d, seed, **kw)


def _steps_of(alpha: float, dt: float) -> int:
    k = int(round(alpha / dt))
    if alpha < 0 or abs(k * dt - alpha) > 1e-9 * max(1.0, abs(alpha)):
        raise InvalidInputError(f"alpha={alpha} is not a nonnegative multiple of dt={dt}")
    return k


def shift(bundle: BrownianBundle, alpha: float) -> BrownianBundle:
    """Increments of ``s -> W(s + alpha) - W(alpha)`` on the grid moved by
    ``alpha``. Steps past the old grid end are generated from the same keys."""
    k = _steps_of(alpha, bundle.grid.dt)
    if k == 0:
        return bundle
    g = bundle.grid
    grid = TimeGrid(g.t0 + k * g.dt, g.T + k * g.dt, g.N)
    shared = bundle.shared_before + k if bundle.sharing == "shared_past" else bundle.shared_before
    return bundle.spawn(grid=grid, step_offset=bundle.step_offset + k, shared_before=shared)


def _x0_paths(x0, P: int, n: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x0 = np.broadcast_to(x0.reshape(-1), (P, n)) if x0.size in (1, n) else None
    if x0 is None or x0.shape != (P, n):
        raise InvalidInputError(f"x0 must have shape ({n},) or ({P}, {n})")
    return np.array(x0, dtype=float)


YSource = Union[None, PathTriple, Tuple[np.ndarray, np.ndarray], Callable]


def _y_at(y_source, i, t, x, xi, P, m, d):
    if y_source is None:
        return np.zeros((P, m)), np.zeros((P, m, d))
    if isinstance(y_source, PathTriple):
        return y_source.Y[:, i], y_source.Z[:, i]
    if isinstance(y_source, tuple):
        return y_source[0][:, i], y_source[1][:, i]
    y, z = y_source(t, x, xi)
    return (np.broadcast_to(np.asarray(y, float), (P, m)),
            np.broadcast_to(np.asarray(z, float), (P, m, d)))


def _diffuse(vol, dW):
    if vol.shape[2] == 1:
        return vol[:, :, 0] * dW
    return np.einsum("pnd,pd->pn", vol, dW)


class _DivergenceGuard:
    """Freezes blown-up paths and aborts above the tolerated fraction."""

    def __init__(self, P, bad=None):
        self.bad = np.zeros(P, dtype=bool) if bad is None else bad.copy()
        self.any_bad = bool(self.bad.any())

    def check(self, x_new, x_old):
        peak = np.max(np.abs(x_new))
        if peak <= DIVERGENCE_LEVEL and not self.any_bad:
            return x_new
        bad = ~np.all(np.isfinite(x_new), axis=1) | (np.max(np.abs(x_new), axis=1) > DIVERGENCE_LEVEL)
        if bad.any():
            self.bad |= bad
            frac = self.bad.mean()
            if frac > DIVERGENCE_FRACTION:
                raise DivergenceError(f"{frac:.3%} of forward paths diverged", frac)
        self.any_bad = bool(self.bad.any())
        if self.any_bad:
            x_new[self.bad] = x_old[self.bad]
        return x_new


@dataclass
class ForwardPaths:
    """In-memory forward output: ``X`` ``(P, N+1, n)``, factors ``xi``."""

    X: np.ndarray
    xi: Optional[np.ndarray]
    divergent: np.ndarray

    def state(self, i):
        return self.X[:, i], (None if self.xi is None else self.xi[:, i])


def forward_paths(coeffs: CoefficientSet, x0, y_source: YSource, bundle: BrownianBundle) -> ForwardPaths:
    """Euler-Maruyama pass keeping every node in memory."""
    g, P, n, m, d = bundle.grid, bundle.paths, coeffs.n, coeffs.m, coeffs.d
    if bundle.d != d:
        raise InvalidInputError("bundle dimension does not match coefficients")
    X = np.empty((P, g.N + 1, n))
    X[:, 0] = _x0_paths(x0, P, n)
    fac = coeffs.factor
    xi = None
    if fac is not None:
        xi = np.empty((P, g.N + 1, fac.q))
        S = fac.initial_state(bundle)
        xi[:, 0] = fac.value(S)
    guard = _DivergenceGuard(P)
    dt = g.dt
    for i in range(g.N):
        t = g.node(i)
        x = X[:, i]
        xii = None if xi is None else xi[:, i]
        y, z = _y_at(y_source, i, t, x, xii, P, m, d)
        dW = bundle.increment(i)
        drift = coeffs.eval_b(t, x, y, z, xii)
        vol = coeffs.eval_sigma(t, x, y, z, xii)
        with np.errstate(over="ignore", invalid="ignore"):
            xn = x + drift * dt + _diffuse(vol, dW)
        X[:, i + 1] = guard.check(xn, x)
        if fac is not None:
            S = fac.advance(bundle, S, i, dW)
            xi[:, i + 1] = fac.value(S)
    return ForwardPaths(X, xi, guard.bad)


def euler_forward(coeffs: CoefficientSet, x0, y_source: YSource, bundle: BrownianBundle) -> np.ndarray:
    """Euler-Maruyama paths ``X`` of shape ``(P, N+1, n)``.

    ``y_source`` supplies ``(Y, Z)`` at each node: a ``PathTriple`` or a tuple
    ``(Y, Z)`` of frozen paths, a field ``(t, x, xi) -> (y, z)``, or ``None``
    for zeros.

    Raises
    ------
    DivergenceError
        If more than 0.1% of paths exceed ``1e12`` or become non-finite.
    """
    return forward_paths(coeffs, x0, y_source, bundle).X


class StreamedForward:
    """Forward paths of a system whose ``b`` and ``sigma`` ignore ``(y, z)``,
    kept as checkpoints every ``block`` steps.

    ``state(i)`` recomputes the enclosing block on demand (together with its
    increments), so a descending sweep regenerates each block once.
    """

    def __init__(self, coeffs: CoefficientSet, x0, bundle: BrownianBundle, block: int = 64):
        if not coeffs.decoupled:
            raise InvalidInputError("streamed forward paths need a forward-decoupled system")
        self.coeffs, self.bundle, self.block = coeffs, bundle, max(1, int(block))
        g, P, n = bundle.grid, bundle.paths, coeffs.n
        self._zy = np.zeros((P, coeffs.m))
        self._zz = np.zeros((P, coeffs.m, coeffs.d))
        x = _x0_paths(x0, P, n)
        fac = coeffs.factor
        S = fac.initial_state(bundle) if fac is not None else None
        self.checkpoints = {}
        self.mean_X = np.empty((g.N + 1, n))
        self.guard = _DivergenceGuard(P)
        for i in range(g.N + 1):
            if i % self.block == 0:
                self.checkpoints[i] = (x.copy(), None if S is None else S.copy(),
                                       self.guard.bad.copy())
            self.mean_X[i] = x.mean(axis=0)
            if i < g.N:
                dW = bundle.increment(i)
                x, S = self._step(i, x, S, dW, self.guard)
        self.X_T = x
        self._cached = None

    def _step(self, i, x, S, dW, guard):
        t = self.bundle.grid.node(i)
        fac = self.coeffs.factor
        xi = None if fac is None else fac.value(S)
        drift = self.coeffs.eval_b(t, x, self._zy, self._zz, xi)
        vol = self.coeffs.eval_sigma(t, x, self._zy, self._zz, xi)
        with np.errstate(over="ignore", invalid="ignore"):
            xn = x + drift * self.bundle.grid.dt + _diffuse(vol, dW)
        xn = guard.check(xn, x)
        if fac is not None:
            S = fac.advance(self.bundle, S, i, dW)
        return xn, S

    def _load(self, c):
        N = self.bundle.grid.N
        x, S, bad = self.checkpoints[c]
        guard = _DivergenceGuard(len(bad), bad)
        hi = min(c + self.block, N)
        fac = self.coeffs.factor
        xs, xis, dws = [x], [], []
        if fac is not None:
            xis.append(fac.value(S))
        for i in range(c, hi):
            dW = self.bundle.increment(i)
            dws.append(dW)
            x, S = self._step(i, x, S, dW, guard)
            xs.append(x)
            if fac is not None:
                xis.append(fac.value(S))
        self._cached = (c, xs, xis, dws)

    def _block(self, i):
        c = min(i, self.bundle.grid.N - 1) // self.block * self.block
        if self._cached is None or self._cached[0] != c:
            self._load(c)
        return self._cached

    def state(self, i):
        c, xs, xis, _ = self._block(i)
        return xs[i - c], (xis[i - c] if xis else None)

    def increment(self, i):
        c, _, _, dws = self._block(i)
        return dws[i - c]
