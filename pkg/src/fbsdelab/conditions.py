"""Solvability windows for the discount weight lambda and empirical
estimation of structural constants."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .core import CoefficientSet, ConstantsRecord
from .errors import DecoupledSystemError, InvalidInputError

RHO_FLOOR = 1e-9


@dataclass(frozen=True)
class LambdaWindow:
    """Open interval ``(lower, upper)`` of admissible discount weights."""

    lower: float
    upper: float
    feasible: bool
    gamma: float
    rho1_used: float
    rho2_used: float
    constraint_ok: bool

    def contains(self, lam: float) -> bool:
        return self.feasible and self.lower < lam < self.upper


def gamma_ratio(c: ConstantsRecord) -> float:
    """``(k2/eps2 + k5) / max(k1/eps1 + k4, k2/eps2 + k5)``.

    Raises
    ------
    DecoupledSystemError
        If ``k1 = k2 = k4 = k5 = 0``.
    """
    a = c.k1 / c.eps1 + c.k4
    b = c.k2 / c.eps2 + c.k5
    if a == 0 and b == 0:
        raise DecoupledSystemError(
            "gamma undefined: b and sigma do not depend on (y, z); use the decoupled path")
    return b / max(a, b)


def _gamma(c: ConstantsRecord, gamma: Optional[float]) -> float:
    if gamma is not None:
        if not 0 <= gamma <= 1:
            raise InvalidInputError("gamma must lie in [0, 1]")
        return float(gamma)
    return gamma_ratio(c)


def upper_bound(c: ConstantsRecord) -> float:
    return (-2 * c.mu1 - c.k3 - c.k1 * c.eps1 - c.k2 * c.eps2
            - max(c.k1 / c.eps1 + c.k4, c.k2 / c.eps2 + c.k5))


def lower_bound_expression(mu2, c1, c2, gamma, rho1, rho2):
    """Lower bound as a function of ``(rho1, rho2)``; ``inf`` where the
    side constraints fail. Broadcasts over array arguments."""
    with np.errstate(divide="ignore", invalid="ignore"):
        s = 1.0 - c2 / rho2
        den = s - gamma * c1 / rho1
        val = 2 * mu2 + c1 * rho1 + c2 * rho2 + (c1 / rho1) * s / den
        ok = (den > 0) & (c2 / rho2 < 1)
    return np.where(ok, val, np.inf)


def _constraints(c1, c2, gamma, rho1, rho2) -> bool:
    return (1 - c2 / rho2 - gamma * c1 / rho1 > 0) and (c2 / rho2 < 1)


def lambda_window(c: ConstantsRecord, gamma: Optional[float] = None) -> LambdaWindow:
    """Window at the ``rho1``, ``rho2`` stored in ``c``.

    ``gamma`` overrides ``gamma_ratio(c)``; for forward-decoupled constants
    (where the ratio is undefined) it defaults to 0.
    """
    if gamma is None and c.forward_decoupled:
        gamma = 0.0
    g = _gamma(c, gamma)
    ok = _constraints(c.c1, c.c2, g, c.rho1, c.rho2)
    if ok:
        lo = float(lower_bound_expression(c.mu2, c.c1, c.c2, g, c.rho1, c.rho2))
    else:
        lo = math.inf
    up = upper_bound(c)
    return LambdaWindow(lo, up, bool(ok and lo < up), g, c.rho1, c.rho2, bool(ok))


def optimal_rhos(c1: float, c2: float, gamma: float) -> Tuple[float, float]:
    sg = math.sqrt(gamma)
    return c1 * gamma + c2 * sg + 1.0, max(c2 + c1 * sg, RHO_FLOOR)


def lambda_window_optimal(c: ConstantsRecord, gamma: Optional[float] = None) -> LambdaWindow:
    """Widest window, attained at ``rho1* = c1 gamma + c2 sqrt(gamma) + 1`` and
    ``rho2* = c2 + c1 sqrt(gamma)``.

    Raises
    ------
    DecoupledSystemError
        If ``gamma`` is not given and the constants are forward-decoupled.
    """
    g = _gamma(c, gamma)
    r1, r2 = optimal_rhos(c.c1, c.c2, g)
    sg = math.sqrt(g)
    lo = 2 * c.mu2 + 2 * c.c1 + 2 * c.c1 * c.c2 * sg + c.c1 ** 2 * g + c.c2 ** 2
    ok = _constraints(c.c1, c.c2, g, r1, r2) or (c.c2 == 0 and c.c1 * sg == 0)
    up = upper_bound(c)
    return LambdaWindow(lo, up, bool(ok and lo < up), g, r1, r2, bool(ok))


def yin_lower_bound(c: ConstantsRecord) -> float:
    """The earlier lower bound ``2 mu2 + 4 c1^2 + 2 c2^2 + 1``."""
    return 2 * c.mu2 + 4 * c.c1 ** 2 + 2 * c.c2 ** 2 + 1


def saddlepoint_window(c: ConstantsRecord) -> LambdaWindow:
    """Window for saddlepoint systems ``f = g - r y`` with ``|r| <= rho0``."""
    if c.rho0 is None or c.mu0 is None or c.c0 is None:
        raise InvalidInputError("saddlepoint window needs rho0, mu0 and c0")
    if c.k2 != 0 or c.k5 != 0 or c.c2 != 0:
        raise InvalidInputError("saddlepoint window requires k2 = k5 = c2 = 0")
    lo = 2 * c.rho0 + 2 * c.mu0 + c.c0 * c.rho1 + c.c0 / c.rho1
    up = -2 * c.mu1 - c.k3 - c.k1 * c.eps1 - c.k1 / c.eps1 - c.k4
    return LambdaWindow(lo, up, bool(lo < up), 0.0, c.rho1, c.rho2, True)


# --------------------------------------------------------------------------
# grid oracle for the minimisation over (rho1, rho2)
# --------------------------------------------------------------------------


def _rhos_from_uv(c1, c2, gamma, u, v):
    """Map boundary-adapted coordinates to ``(rho1, rho2)``: ``rho2 = c2 + e^u``
    keeps ``c2/rho2 < 1`` and ``rho1 = gamma c1 / s + e^v`` with
    ``s = 1 - c2/rho2`` keeps the second side constraint."""
    rho2 = c2 + np.exp(u)
    s = 1.0 - c2 / rho2
    rho1 = gamma * c1 / s + np.exp(v)
    return rho1, rho2


def grid_minimize_lower(mu2, c1, c2, gamma, n: int = 64, zoom_levels: int = 60,
                        n_zoom: int = 9, span=(1e-3, 1e3)):
    """Brute-force minimum of ``lower_bound_expression`` over the feasible
    ``(rho1, rho2)`` region.

    The search runs in the boundary-adapted coordinates of ``_rhos_from_uv``:
    an ``n x n`` grid with ``e^u, e^v`` logarithmic on ``span``, followed by
    ``zoom_levels`` local ``n_zoom x n_zoom`` grids centred on the incumbent
    (the local grid keeps its width while it improves and halves otherwise).
    Inputs may be arrays, one problem per entry.

    Returns
    -------
    value, rho1, rho2 : ndarray
    """
    mu2, c1, c2, gamma = (np.atleast_1d(np.asarray(a, float)) for a in (mu2, c1, c2, gamma))
    B = np.broadcast(mu2, c1, c2, gamma).shape[0]
    mu2, c1, c2, gamma = (np.broadcast_to(a, (B,))[:, None, None] for a in (mu2, c1, c2, gamma))
    lg = np.linspace(math.log(span[0]), math.log(span[1]), n)
    step = lg[1] - lg[0]
    best_v = np.full(B, np.inf)
    best_u = np.zeros(B)
    best_w = np.zeros(B)

    def evaluate(u, w):
        r1, r2 = _rhos_from_uv(c1, c2, gamma, u, w)
        return lower_bound_expression(mu2, c1, c2, gamma, r1, r2).reshape(B, -1)

    # coarse pass in row blocks to bound memory
    rows = max(1, int(2e7 // max(1, B * n)))
    for a in range(0, n, rows):
        v = evaluate(lg[None, a:a + rows, None], lg[None, None, :])
        k = np.argmin(v, axis=1)
        vk = v[np.arange(B), k]
        upd = vk < best_v
        best_v[upd] = vk[upd]
        best_u[upd] = lg[a:a + rows][k[upd] // n]
        best_w[upd] = lg[k[upd] % n]
    off = np.linspace(-1.0, 1.0, n_zoom)
    width = np.full(B, 2.0 * step)
    for _ in range(zoom_levels):
        lu = best_u[:, None, None] + width[:, None, None] * off[None, :, None]
        lw = best_w[:, None, None] + width[:, None, None] * off[None, None, :]
        v = evaluate(lu, lw)
        k = np.argmin(v, axis=1)
        vk = v[np.arange(B), k]
        upd = vk < best_v
        best_v[upd] = vk[upd]
        best_u[upd] = lu[upd, k[upd] // n_zoom, 0]
        best_w[upd] = lw[upd, 0, k[upd] % n_zoom]
        width = np.where(upd, width, 0.5 * width)
    r1, r2 = _rhos_from_uv(c1[:, 0, 0], c2[:, 0, 0], gamma[:, 0, 0], best_u, best_w)
    return best_v, r1, r2


# --------------------------------------------------------------------------
# empirical constants
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    """Box and sample size for ``estimate_constants``."""

    n_pairs: int = 10_000
    x_box: Tuple[float, float] = (-2.0, 2.0)
    y_box: Tuple[float, float] = (-2.0, 2.0)
    z_box: Tuple[float, float] = (-2.0, 2.0)
    xi_box: Tuple[float, float] = (-2.0, 2.0)
    t_box: Tuple[float, float] = (0.0, 1.0)
    seed: int = 0


def _rows(a):
    return a.reshape(a.shape[0], -1)


def estimate_constants(coeffs: CoefficientSet, cfg: SamplerConfig = SamplerConfig()) -> ConstantsRecord:
    """Sample-maximum estimates of the structural constants.

    Each quotient is a lower bound of the true supremum. ``k3``, ``k4``,
    ``k5`` are squared Lipschitz quotients of ``sigma``.
    """
    rng = np.random.default_rng(cfg.seed)
    P, n, m, d = cfg.n_pairs, coeffs.n, coeffs.m, coeffs.d
    q = coeffs.factor.q if coeffs.factor is not None else 0

    def draw(box, *shape):
        return rng.uniform(box[0], box[1], size=(P,) + shape)

    t = float(rng.uniform(*cfg.t_box))
    x1, x2 = draw(cfg.x_box, n), draw(cfg.x_box, n)
    y1, y2 = draw(cfg.y_box, m), draw(cfg.y_box, m)
    z1, z2 = draw(cfg.z_box, m, d), draw(cfg.z_box, m, d)
    xi = draw(cfg.xi_box, q) if q else None
    B, S, F = coeffs.eval_b, coeffs.eval_sigma, coeffs.eval_f

    def nrm(a):
        return np.linalg.norm(_rows(a), axis=1)

    def quot(num, den):
        ok = den > 1e-12
        return float(np.max(num[ok] / den[ok])) if ok.any() else 0.0

    def mono(g1, g2, a1, a2):
        da = _rows(a1 - a2)
        return quot(np.sum(_rows(g1 - g2) * da, axis=1), np.sum(da ** 2, axis=1))

    mu1 = mono(B(t, x1, y1, z1, xi), B(t, x2, y1, z1, xi), x1, x2)
    mu2 = mono(F(t, x1, y1, z1, xi), F(t, x1, y2, z1, xi), y1, y2)
    k1 = quot(nrm(B(t, x1, y1, z1, xi) - B(t, x1, y2, z1, xi)), nrm(y1 - y2))
    k2 = quot(nrm(B(t, x1, y1, z1, xi) - B(t, x1, y1, z2, xi)), nrm(z1 - z2))
    c1 = quot(nrm(F(t, x1, y1, z1, xi) - F(t, x2, y1, z1, xi)), nrm(x1 - x2))
    c2 = quot(nrm(F(t, x1, y1, z1, xi) - F(t, x1, y1, z2, xi)), nrm(z1 - z2))
    k3 = quot(nrm(S(t, x1, y1, z1, xi) - S(t, x2, y1, z1, xi)) ** 2, nrm(x1 - x2) ** 2)
    k4 = quot(nrm(S(t, x1, y1, z1, xi) - S(t, x1, y2, z1, xi)) ** 2, nrm(y1 - y2) ** 2)
    k5 = quot(nrm(S(t, x1, y1, z1, xi) - S(t, x1, y1, z2, xi)) ** 2, nrm(z1 - z2) ** 2)
    zy, zz = np.zeros_like(y1), np.zeros_like(z1)
    growth = nrm(B(t, x1, zy, zz, xi)) - nrm(B(t, np.zeros_like(x1), zy, zz, xi))
    k = max(0.0, float(np.max(growth / (1 + nrm(x1)))))
    return ConstantsRecord(mu1=mu1, mu2=mu2, c1=c1, c2=c2, k=k, k1=k1, k2=k2,
                           k3=k3, k4=k4, k5=k5 if coeffs.sigma_depends_on_z else 0.0)
