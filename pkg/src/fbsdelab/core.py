"""Time grids, Brownian bundles, path containers, weighted norms and the
coefficient abstraction shared by every other module.

Conventions
-----------
Path tensors are indexed ``(path, node, ...)``. A grid with ``N`` steps has
``N + 1`` nodes. ``Z`` is stored with shape ``(P, N + 1, m, d)``; its value at
the last node repeats the value at node ``N - 1`` and never enters a norm.

Coefficient evaluators are called as ``g(t, x, y, z, xi)`` with ``t`` a float,
``x`` of shape ``(P, n)``, ``y`` of shape ``(P, m)``, ``z`` of shape
``(P, m, d)`` and ``xi`` either ``None`` or the exogenous factor values of
shape ``(P, q)``. Outputs may be anything broadcastable to the declared shape.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInputError

_MASK64 = (1 << 64) - 1
_BLOCK = 65536


# --------------------------------------------------------------------------
# time grid
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 < t0 + dt < ... < T`` with ``N`` steps."""

    t0: float
    T: float
    N: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.T)):
            raise InvalidInputError("grid end points must be finite")
        if not self.T > self.t0:
            raise InvalidInputError(f"need T > t0, got t0={self.t0}, T={self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidInputError(f"need an integer N >= 1, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @classmethod
    def from_step(cls, t0: float, horizon: float, dt: float) -> "TimeGrid":
        """Grid on ``[t0, t0 + horizon]`` whose step is ``dt`` (horizon rounded
        to a whole number of steps)."""
        if dt <= 0 or horizon <= 0:
            raise InvalidInputError("dt and horizon must be positive")
        n = max(1, int(round(horizon / dt)))
        return cls(t0, t0 + n * dt, n)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    def node(self, i: int) -> float:
        return self.t0 + i * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.N + 1) * self.dt


# --------------------------------------------------------------------------
# structural constants and coefficients
# --------------------------------------------------------------------------

_NONNEG = ("c1", "c2", "k", "k1", "k2", "k3", "k4", "k5")
_POS = ("eps1", "eps2", "rho1", "rho2")


@dataclass(frozen=True)
class ConstantsRecord:
    """Monotonicity, Lipschitz and auxiliary constants of the coefficients.

    ``k3``, ``k4`` and ``k5`` are squared-Lipschitz constants of ``sigma`` in
    ``x``, ``y`` and ``z``. ``lam`` is the discount weight.
    """

    mu1: float = 0.0
    mu2: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    k: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    k5: float = 0.0
    eps1: float = 1.0
    eps2: float = 1.0
    rho1: float = 1.0
    rho2: float = 1.0
    lam: float = 0.0
    rho0: Optional[float] = None
    mu0: Optional[float] = None
    c0: Optional[float] = None

    def __post_init__(self):
        for name in _NONNEG:
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")
        for name in _POS:
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidInputError(f"{name} must be finite and > 0, got {v}")
        for name in ("mu1", "mu2", "lam"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidInputError(f"{name} must be finite")
        if self.c0 is not None and self.c0 < 0:
            raise InvalidInputError("c0 must be >= 0")
        if self.rho0 is not None and self.rho0 < 0:
            raise InvalidInputError("rho0 must be >= 0")

    def with_(self, **kw) -> "ConstantsRecord":
        return replace(self, **kw)

    @property
    def forward_decoupled(self) -> bool:
        """True when neither ``b`` nor ``sigma`` depends on ``(y, z)``."""
        return self.k1 == 0 and self.k2 == 0 and self.k4 == 0 and self.k5 == 0


Evaluator = Callable[..., np.ndarray]


@dataclass(frozen=True)
class CoefficientSet:
    """Evaluators ``b``, ``sigma``, ``f`` of the system
    ``dX = b dt + sigma dW``, ``dY = -f dt + Z dW`` and their constants."""

    b: Evaluator
    sigma: Evaluator
    f: Evaluator
    constants: ConstantsRecord
    n: int = 1
    m: int = 1
    d: int = 1
    sigma_depends_on_z: bool = False
    deterministic_coefficients: bool = True
    autonomous: bool = True
    factor: Optional["BrownianFactor"] = None
    decoupled: Optional[bool] = None
    name: str = "custom"

    def __post_init__(self):
        for nm in ("n", "m", "d"):
            if int(getattr(self, nm)) < 1:
                raise InvalidInputError(f"dimension {nm} must be >= 1")
        if not self.sigma_depends_on_z and self.constants.k5 != 0:
            raise InvalidInputError("sigma_depends_on_z is false but k5 != 0")
        if self.factor is not None and self.deterministic_coefficients:
            object.__setattr__(self, "deterministic_coefficients", False)
        if self.decoupled is None:
            object.__setattr__(self, "decoupled", self.constants.forward_decoupled)

    # broadcasting wrappers ------------------------------------------------
    def eval_b(self, t, x, y, z, xi=None) -> np.ndarray:
        out = np.asarray(self.b(t, x, y, z, xi), dtype=float)
        return np.broadcast_to(out, (x.shape[0], self.n))

    def eval_sigma(self, t, x, y, z, xi=None) -> np.ndarray:
        out = np.asarray(self.sigma(t, x, y, z, xi), dtype=float)
        return np.broadcast_to(out, (x.shape[0], self.n, self.d))

    def eval_f(self, t, x, y, z, xi=None) -> np.ndarray:
        out = np.asarray(self.f(t, x, y, z, xi), dtype=float)
        return np.broadcast_to(out, (x.shape[0], self.m))

    def with_(self, **kw) -> "CoefficientSet":
        if "constants" in kw and "decoupled" not in kw:
            kw["decoupled"] = kw["constants"].forward_decoupled
        return replace(self, **kw)


# --------------------------------------------------------------------------
# counter-based Brownian increments
# --------------------------------------------------------------------------


def _uniform_normals(seed: int, abs_step: int, dim: int, start: int, count: int) -> np.ndarray:
    """Standard normals for keys ``start .. start+count-1`` of one
    ``(seed, step, dim)`` stream. Keys are split into fixed blocks of
    ``_BLOCK`` with independent SFC64 streams, so each output depends only on
    its key and never on how the range is chunked."""
    out = np.empty(count)
    pos = 0
    while pos < count:
        key = start + pos
        blk, off = divmod(key, _BLOCK)
        take = min(count - pos, _BLOCK - off)
        ss = np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, abs_step, dim, blk])
        gen = np.random.Generator(np.random.SFC64(ss))
        if off:
            buf = gen.standard_normal(off + take)
            out[pos:pos + take] = buf[off:]
        else:
            gen.standard_normal(out=out[pos:pos + take])
        pos += take
    return out


class BrownianBundle:
    """Lazily generated Brownian increments on a grid.

    Increment ``(path p, absolute step j, dim k)`` is a pure function of
    ``(seed, key(p, j), j, k)``, so results never depend on chunking or on
    the number of worker threads.

    Parameters
    ----------
    grid : TimeGrid
    paths, d : int
    seed : int
    step_offset : int
        Absolute index of the grid's first step. ``shift`` increases it.
    group_size : int, optional
        Paths are organised in consecutive groups of this size.
    sharing : {"independent", "replicate", "shared_past"}
        ``replicate`` gives every group the same noise (common random numbers
        across groups). ``shared_past`` makes all paths of a group share the
        increments at absolute steps below ``shared_before``.
    shared_before : int
        See ``sharing``.
    threads : int
        Worker cap for generation; does not change results.
    cache_bytes : int
        Increments for the grid steps are cached when they fit this budget.
    """

    def __init__(self, grid: TimeGrid, paths: int, d: int, seed: int, *,
                 step_offset: int = 0, group_size: Optional[int] = None,
                 sharing: str = "independent", shared_before: int = 0,
                 threads: int = 1, cache_bytes: int = 256 * 2 ** 20):
        if paths < 1 or d < 1:
            raise InvalidInputError("need paths >= 1 and d >= 1")
        if step_offset < 0:
            raise InvalidInputError("step_offset must be >= 0")
        if sharing not in ("independent", "replicate", "shared_past"):
            raise InvalidInputError(f"unknown sharing mode {sharing!r}")
        if sharing != "independent":
            if group_size is None or group_size < 1 or paths % group_size:
                raise InvalidInputError("group_size must divide paths")
        self.grid = grid
        self.paths = int(paths)
        self.d = int(d)
        self.seed = int(seed) & _MASK64
        self.step_offset = int(step_offset)
        self.group_size = group_size
        self.sharing = sharing
        self.shared_before = int(shared_before)
        self.threads = max(1, int(threads))
        self.cache_bytes = cache_bytes
        self._cache = None
        self._sqdt = math.sqrt(grid.dt)

    # identity ---------------------------------------------------------------
    def spawn(self, **kw) -> "BrownianBundle":
        args = dict(grid=self.grid, paths=self.paths, d=self.d, seed=self.seed,
                    step_offset=self.step_offset, group_size=self.group_size,
                    sharing=self.sharing, shared_before=self.shared_before,
                    threads=self.threads, cache_bytes=self.cache_bytes)
        args.update(kw)
        return BrownianBundle(args.pop("grid"), args.pop("paths"), args.pop("d"),
                              args.pop("seed"), **args)

    @property
    def n_groups(self) -> int:
        return self.paths // self.group_size if self.group_size else 1

    # generation -------------------------------------------------------------
    def _contiguous(self, abs_step: int, dim: int, count: int) -> np.ndarray:
        if self.threads == 1 or count < 4096:
            return _uniform_normals(self.seed, abs_step, dim, 0, count)
        nb = -(-count // _BLOCK)
        cuts = np.linspace(0, nb, min(self.threads, nb) + 1).astype(int) * _BLOCK
        bounds = np.minimum(cuts, count)
        out = np.empty(count)

        def work(c):
            a, b = bounds[c], bounds[c + 1]
            out[a:b] = _uniform_normals(self.seed, abs_step, dim, int(a), int(b - a))

        with ThreadPoolExecutor(self.threads) as ex:
            list(ex.map(work, range(len(bounds) - 1)))
        return out

    def absolute_increment(self, abs_step: int) -> np.ndarray:
        """Increments ``(P, d)`` at an absolute step index."""
        if abs_step < 0:
            raise InvalidInputError("absolute step index must be >= 0")
        P, g = self.paths, self.group_size
        out = np.empty((P, self.d))
        for k in range(self.d):
            if self.sharing == "replicate":
                out[:, k] = np.tile(self._contiguous(abs_step, k, g), P // g)
            elif self.sharing == "shared_past" and abs_step < self.shared_before:
                lead = self._contiguous(abs_step, k, P)[::g]
                out[:, k] = np.repeat(lead, g)
            else:
                out[:, k] = self._contiguous(abs_step, k, P)
        out *= self._sqdt
        return out

    def _fill_cache(self):
        N = self.grid.N
        if self._cache is None and self.paths * N * self.d * 8 <= self.cache_bytes:
            cache = np.empty((N, self.paths, self.d))
            for i in range(N):
                cache[i] = self.absolute_increment(self.step_offset + i)
            self._cache = cache

    def increment(self, i: int) -> np.ndarray:
        """Increments ``(P, d)`` of relative step ``i`` (``i`` may be negative
        for look-back or ``>= N`` beyond the grid)."""
        if 0 <= i < self.grid.N:
            self._fill_cache()
            if self._cache is not None:
                return self._cache[i]
        return self.absolute_increment(self.step_offset + i)

    @property
    def increments(self) -> np.ndarray:
        """Full tensor ``(P, N, d)``. Materialises every step."""
        out = np.empty((self.paths, self.grid.N, self.d))
        for i in range(self.grid.N):
            out[:, i, :] = self.increment(i)
        return out

    def brownian_levels(self) -> np.ndarray:
        """``W(t_i) - W(t_0)`` with shape ``(P, N + 1, d)``."""
        out = np.zeros((self.paths, self.grid.N + 1, self.d))
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        return out


# --------------------------------------------------------------------------
# exogenous factors for random coefficients
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BrownianFactor:
    """Exogenous factor ``xi(t) = fn(S(t))`` built from the driving noise.

    ``S(t) = W(t) - W(t - window)`` when ``window_steps`` is set (a
    shift-invariant functional, hence stationary), else ``S(t) = W(t)``
    measured from absolute time zero (not stationary).
    """

    fn: Callable[[np.ndarray], np.ndarray]
    q: int = 1
    window_steps: Optional[int] = None

    def initial_state(self, bundle: BrownianBundle) -> np.ndarray:
        first = -bundle.step_offset if self.window_steps is None else -self.window_steps
        if bundle.step_offset + first < 0:
            raise InvalidInputError(
                "factor look-back reaches before absolute time zero; start later")
        S = np.zeros((bundle.paths, bundle.d))
        for j in range(first, 0):
            S += bundle.increment(j)
        return S

    def advance(self, bundle: BrownianBundle, S: np.ndarray, i: int, dW: np.ndarray) -> np.ndarray:
        S = S + dW
        if self.window_steps is not None:
            S -= bundle.increment(i - self.window_steps)
        return S

    def value(self, S: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(S), dtype=float).reshape(S.shape[0], self.q)


# --------------------------------------------------------------------------
# paths and norms
# --------------------------------------------------------------------------


@dataclass
class PathTriple:
    """Sample paths of ``(X, Y, Z)`` on a grid, optionally with factor values."""

    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    grid: TimeGrid
    xi: Optional[np.ndarray] = None

    def __post_init__(self):
        P, K = self.X.shape[:2]
        if K != self.grid.N + 1:
            raise InvalidInputError("X node count does not match the grid")
        if self.Y.shape[:2] != (P, K) or self.Z.shape[:2] != (P, K):
            raise InvalidInputError("X, Y, Z shapes are inconsistent")
        if self.Z.ndim != 4 or self.Z.shape[2] != self.Y.shape[2]:
            raise InvalidInputError("Z must have shape (P, N+1, m, d)")

    @property
    def paths(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class WeightedNormResult:
    value: float
    lam: float
    component: str


_COMPONENTS = ("X", "Y", "Z", "combined")


def _sq_per_node(arr: np.ndarray) -> np.ndarray:
    """Squared Euclidean/Frobenius norm per (path, node)."""
    return np.sum(arr.reshape(arr.shape[0], arr.shape[1], -1) ** 2, axis=2)


def weighted_norm_array(arr: np.ndarray, grid: TimeGrid, lam: float) -> float:
    """Left-endpoint estimate of ``E int e^{lam t} |arr|^2 dt`` for one tensor."""
    if arr.shape[0] == 0:
        raise InvalidInputError("empty path batch")
    w = np.exp(lam * grid.times()[:-1]) * grid.dt
    sq = _sq_per_node(arr)[:, :-1]
    return float(np.mean(sq, axis=0) @ w)


def weighted_norm(paths: PathTriple, lam: float, component: str = "combined") -> WeightedNormResult:
    """Monte Carlo estimate of the weighted norm
    ``(1/P) sum_p sum_{i<N} e^{lam t_i} |.|^2 dt``.

    Parameters
    ----------
    paths : PathTriple
    lam : float
    component : {"X", "Y", "Z", "combined"}
    """
    if component not in _COMPONENTS:
        raise InvalidInputError(f"component must be one of {_COMPONENTS}")
    if paths.X.shape[0] == 0:
        raise InvalidInputError("empty path batch")
    if not math.isfinite(lam):
        raise InvalidInputError("lambda must be finite")
    if component == "combined":
        v = sum(weighted_norm_array(a, paths.grid, lam) for a in (paths.X, paths.Y, paths.Z))
    else:
        v = weighted_norm_array(getattr(paths, component), paths.grid, lam)
    return WeightedNormResult(v, lam, component)


def resample_grid(paths: PathTriple, finer: TimeGrid) -> PathTriple:
    """Inject paths into a finer nested grid.

    ``X`` is linearly interpolated; ``Y``, ``Z`` (and factors) are held at the
    value of the last coarse node, so every shared node is reproduced exactly.
    """
    g = paths.grid
    r = finer.N // g.N if finer.N % g.N == 0 else 0
    if r == 0 or not (math.isclose(finer.t0, g.t0, abs_tol=1e-12)
                      and math.isclose(finer.T, g.T, rel_tol=1e-12, abs_tol=1e-12)):
        raise InvalidInputError("finer grid must contain the coarse nodes")
    j = np.arange(finer.N + 1)
    lo = np.minimum(j // r, g.N - 1)
    w = (j - lo * r) / r
    held = j // r

    def lin(a):
        ww = w.reshape((1, -1) + (1,) * (a.ndim - 2))
        return a[:, lo] * (1 - ww) + a[:, lo + 1] * ww

    X = lin(paths.X)
    X[:, ::r] = paths.X
    xi = None if paths.xi is None else paths.xi[:, held]
    return PathTriple(X, paths.Y[:, held].copy(), paths.Z[:, held].copy(), finer, xi)


def standard_error(samples: np.ndarray, axis: int = 0) -> np.ndarray:
    """Standard error of the mean along ``axis``."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[axis]
    if n < 2:
        return np.zeros(np.delete(samples.shape, axis)) if samples.ndim > 1 else np.array(0.0)
    return np.std(samples, axis=axis, ddof=1) / math.sqrt(n)
