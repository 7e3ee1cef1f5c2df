"""Model zoo: economic and financial systems stored in the general form
``dX = b dt + sigma dW``, ``dY = -f dt + Z dW`` with their constants,
analytic oracles and the saddlepoint-equivalence residual."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np

from .conditions import SamplerConfig, estimate_constants
from .core import BrownianFactor, CoefficientSet, ConstantsRecord, PathTriple
from .errors import InvalidInputError, OracleUnavailableError


@dataclass(frozen=True)
class SignMap:
    """Orientation of the published martingale integrand.

    The published model writes ``-z dW`` (``z_sign = -1``) or ``+Z dW``
    (``z_sign = +1``); the general form always uses ``+Z dW``.
    """

    z_sign: float = 1.0

    def to_general(self, y, z_paper):
        return y, self.z_sign * np.asarray(z_paper)

    def to_paper(self, y, z_general):
        return y, self.z_sign * np.asarray(z_general)


MINUS_Z = SignMap(-1.0)
PLUS_Z = SignMap(1.0)


@dataclass
class Saddlepoint:
    """Decomposition ``f(t, x, y) = g(t, x, y) - r(t, x) y``."""

    g: Callable
    r: Callable


@dataclass
class ModelSpec:
    """A zoo entry.

    ``oracle(t, x)`` returns the exact general-form ``(y, Z)`` of the
    stationary system when known. ``terminal`` is the truncation condition
    ``Phi(T, x)`` (``None`` means zero).
    """

    coeffs: CoefficientSet
    name: str
    paper_constants: ConstantsRecord
    sign_map: SignMap = PLUS_Z
    oracle: Optional[Callable] = None
    terminal: Optional[Callable] = None
    params: dict = field(default_factory=dict)
    saddlepoint: Optional[Saddlepoint] = None
    x0: Optional[np.ndarray] = None


# --------------------------------------------------------------------------
# Krugman target zone
# --------------------------------------------------------------------------


def krugman_model(gamma: float, sigma: float, m: Union[float, Callable] = 1.0,
                  x0: float = 0.0, terminal: str = "zero", drift_t: float = 0.0) -> ModelSpec:
    """Exchange-rate model: fundamental ``v`` with ``dv = sigma dW`` and the
    log rate ``s`` solving ``f = (m + v - s) / gamma``.

    Parameters
    ----------
    m : float or callable
        Constant money supply, or a bounded function of time.
    terminal : {'zero', 'exact'}
        Truncation condition ``Y(T) = 0`` or ``Y(T) = m + X(T)``.
    drift_t : float
        Coefficient ``kappa`` of an explicit ``b = kappa t`` term; nonzero
        values give a time-inhomogeneous variant (no oracle).
    """
    if not gamma > 0:
        raise InvalidInputError("gamma must be positive")
    if terminal not in ("zero", "exact"):
        raise InvalidInputError("terminal must be 'zero' or 'exact'")
    g = float(gamma)
    m_fn = m if callable(m) else (lambda t, _m=float(m): _m)

    def b(t, x, y, z, xi):
        return drift_t * t

    def sig(t, x, y, z, xi):
        return sigma

    def f(t, x, y, z, xi):
        return (m_fn(t) + x - y) / g

    consts = ConstantsRecord(mu2=-1.0 / g, c1=1.0 / g)
    autonomous = drift_t == 0 and not callable(m)
    coeffs = CoefficientSet(b, sig, f, consts, autonomous=autonomous, name="krugman")
    oracle = None
    if autonomous:
        mc = float(m)

        def oracle(t, x):
            x = np.asarray(x, float)
            return mc + x, np.full(x.shape, float(sigma))
    term = None
    if terminal == "exact":
        if not autonomous:
            raise InvalidInputError("the exact terminal needs constant m and no time drift")
        term = lambda T, x, _m=float(m): _m + x
    sp = Saddlepoint(g=lambda t, x, y: (m_fn(t) + x) / g, r=lambda t, x: np.full(x.shape, 1.0 / g))
    return ModelSpec(coeffs, "krugman", consts, MINUS_Z, oracle, term,
                     dict(gamma=g, sigma=sigma, m=m, drift_t=drift_t), sp, np.array([x0]))


# --------------------------------------------------------------------------
# Dornbusch overshooting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DornbuschParams:
    nu: float
    xi: float
    vartheta: float
    eta: float
    phi: float
    sigma: float = 0.1
    m: float = 1.0

    @property
    def D(self) -> float:
        return self.nu * self.vartheta + self.xi - self.phi * self.vartheta * self.xi

    def linear(self):
        """``b = bm + bp p + bs s`` and ``f = fm + fp p + fs s``."""
        D, p = self.D, self
        b = (p.phi * p.vartheta * p.m / D, -p.phi * (p.vartheta + p.xi * p.eta) / D,
             p.phi * p.xi * p.eta / D)
        f = (-(p.phi * p.vartheta - 1) * p.m / D, -(1 - p.nu * p.eta - p.phi * p.vartheta) / D,
             -p.nu * p.eta / D)
        return b, f


@dataclass(frozen=True)
class AffineOracle:
    """Affine decoupling ``s = alpha p + beta``; unpacks to ``(alpha, beta)``."""

    alpha: float
    beta: float
    kappa: float
    residual: float
    roots: Tuple[float, ...]

    def __iter__(self):
        yield self.alpha
        yield self.beta


def _affine_residuals(b, f, alpha, beta):
    # Y = alpha X + beta solves the system iff alpha * b = -f on affine terms
    r1 = alpha * (b[1] + b[2] * alpha) + (f[1] + f[2] * alpha)
    r2 = alpha * (b[0] + b[2] * beta) + (f[0] + f[2] * beta)
    return r1, r2


def affine_decoupling(b, f, lam: Optional[float] = None) -> AffineOracle:
    """Affine decoupling field of a scalar linear system.

    Among the roots of ``b_s alpha^2 + (b_p + f_s) alpha + f_p = 0`` keeps
    those with closed-loop drift ``kappa = b_p + b_s alpha`` satisfying
    ``2 kappa + lam < 0`` (``kappa < 0`` without ``lam``) and returns the
    most stable one.
    """
    a2, a1, a0 = b[2], b[1] + f[2], f[1]
    if abs(a2) < 1e-15:
        if abs(a1) < 1e-15:
            raise OracleUnavailableError("affine decoupling is degenerate")
        roots = (-a0 / a1,)
    else:
        disc = a1 * a1 - 4 * a2 * a0
        if disc < 0:
            raise OracleUnavailableError("decoupling quadratic has no real root")
        sq = math.sqrt(disc)
        q = -0.5 * (a1 + math.copysign(sq, a1))
        roots = tuple(sorted({q / a2, a0 / q} if q != 0 else {0.0, -a1 / a2}))
    bound = 0.0 if lam is None else -lam / 2
    ok = [(b[1] + b[2] * a, a) for a in roots if b[1] + b[2] * a < bound]
    if not ok:
        raise OracleUnavailableError("no root gives a stable closed loop")
    kappa, alpha = min(ok)
    den = alpha * b[2] + f[2]
    if abs(den) < 1e-15:
        raise OracleUnavailableError("affine intercept is undetermined")
    beta = -(alpha * b[0] + f[0]) / den
    r1, r2 = _affine_residuals(b, f, alpha, beta)
    return AffineOracle(alpha, beta, kappa, max(abs(r1), abs(r2)), roots)


def dornbusch_oracle(params: DornbuschParams, lam: Optional[float] = None) -> AffineOracle:
    """Affine oracle ``s = alpha p + beta`` of the Dornbusch system.

    Raises
    ------
    OracleUnavailableError
        If no real root yields a stable closed-loop drift.
    """
    b, f = params.linear()
    return affine_decoupling(b, f, lam)


def dornbusch_model(nu: float, xi: float, vartheta: float, eta: float, phi: float,
                    sigma: float = 0.1, m: float = 1.0, p0: float = 0.5) -> ModelSpec:
    """Overshooting model for the price level ``p`` and exchange rate ``s``."""
    prm = DornbuschParams(nu, xi, vartheta, eta, phi, sigma, m)
    if abs(prm.D) < 1e-14:
        raise InvalidInputError("D = nu vartheta + xi - phi vartheta xi must be nonzero")
    (b0, bp, bs), (f0, fp, fs) = prm.linear()

    def b(t, x, y, z, xi_):
        return b0 + bp * x + bs * y

    def sig(t, x, y, z, xi_):
        return sigma

    def f(t, x, y, z, xi_):
        return f0 + fp * x + fs * y

    consts = ConstantsRecord(mu1=bp, mu2=fs, c1=abs(fp), k1=abs(bs))
    coeffs = CoefficientSet(b, sig, f, consts, name="dornbusch")
    try:
        orc = dornbusch_oracle(prm)
        oracle = lambda t, x, o=orc: (o.alpha * np.asarray(x, float) + o.beta,
                                      np.full(np.shape(x), o.alpha * sigma))
    except OracleUnavailableError:
        oracle = None
    return ModelSpec(coeffs, "dornbusch", consts, MINUS_Z, oracle, None,
                     dict(params=prm), None, np.array([p0]))


def dornbusch_window(params: DornbuschParams, eps1: float = 1.0) -> Tuple[float, float]:
    """Published closed-form window of the Dornbusch system."""
    p = params
    D = p.D
    lo = -2 * p.nu * p.eta / D + 2 * abs(1 - p.nu * p.eta - p.phi * p.vartheta) / abs(D)
    up = 2 * p.phi * (p.vartheta + p.xi * p.eta) / D - abs(p.phi * p.xi) * p.eta / abs(D) * (eps1 + 1 / eps1)
    return lo, up


# --------------------------------------------------------------------------
# Blanchard with random interest rate
# --------------------------------------------------------------------------


def sine_rate(r0: float, r1: float, window: Optional[int] = 100):
    """``i(t) = r0 + r1 sin(S(t))`` driven by ``S = W(t) - W(t - window dt)``
    (stationary) or ``S = W(t)`` when ``window`` is ``None``.

    Returns ``(i_proc, factor, bounds)`` for ``blanchard_model``.
    """
    fac = BrownianFactor(np.sin, 1, window)
    return (lambda t, xi: r0 + r1 * xi[:, 0]), fac, (r0 - abs(r1), r0 + abs(r1))


def blanchard_model(a1: float, a2: float, a3: float, rho: float, theta_s: float, sigma: float,
                    i_proc: Union[float, Callable] = 0.05, g_proc: Union[float, Callable] = 0.0,
                    c_proc: Union[float, Callable] = 0.0, *, factor: Optional[BrownianFactor] = None,
                    bounds: Optional[dict] = None, autonomous: Optional[bool] = None,
                    x0: float = 0.0) -> ModelSpec:
    """Output ``x`` and asset value ``s`` with coefficient processes.

    Callables take ``(t, xi)`` with ``xi`` the ``(P, q)`` factor values (or
    ``None``) and must come with ``bounds[name] = (lo, hi)``.
    """
    bounds = dict(bounds or {})
    procs = dict(i=i_proc, g=g_proc, c=c_proc)
    for k, v in procs.items():
        if callable(v):
            lo_hi = bounds.get(k)
            if lo_hi is None or not all(math.isfinite(u) for u in lo_hi):
                raise InvalidInputError(f"coefficient process {k} needs finite bounds")
        elif not math.isfinite(v):
            raise InvalidInputError(f"coefficient {k} must be finite")
    disc = rho * theta_s * sigma ** 2

    def val(v, t, xi):
        if callable(v):
            out = np.asarray(v(t, xi), float)
            return out.reshape(-1, 1) if out.ndim == 1 else out
        return v

    def b(t, x, y, z, xi):
        return a3 * (a1 - 1) * x + a2 * a3 * y + a3 * val(g_proc, t, xi)

    def sig(t, x, y, z, xi):
        return sigma

    def f(t, x, y, z, xi):
        return -(val(i_proc, t, xi) + disc) * y + val(c_proc, t, xi)

    i_min = bounds["i"][0] if callable(i_proc) else float(i_proc)
    consts = ConstantsRecord(mu1=a3 * (a1 - 1), mu2=-(i_min + disc), k1=abs(a2 * a3))
    if autonomous is None:
        autonomous = not any(callable(v) for v in procs.values()) or (
            factor is not None and factor.window_steps is not None)
    coeffs = CoefficientSet(b, sig, f, consts, factor=factor, autonomous=autonomous,
                            deterministic_coefficients=factor is None, name="blanchard")
    sp = Saddlepoint(g=lambda t, x, y, xi=None: val(c_proc, t, xi),
                     r=lambda t, x, xi=None: np.broadcast_to(val(i_proc, t, xi) + disc, x.shape))
    oracle = None
    if not any(callable(v) for v in procs.values()) and c_proc == 0 and g_proc == 0 and a2 == 0:
        oracle = lambda t, x: (np.zeros(np.shape(x)), np.zeros(np.shape(x)))
    return ModelSpec(coeffs, "blanchard", consts, MINUS_Z, oracle, None,
                     dict(a1=a1, a2=a2, a3=a3, rho=rho, theta_s=theta_s, sigma=sigma),
                     sp, np.array([x0]))


# --------------------------------------------------------------------------
# Black consol
# --------------------------------------------------------------------------


def _evaluator(v):
    if callable(v):
        return v
    return lambda t, r, y, _v=float(v): _v


def black_consol_model(mu: Union[float, Callable] = 0.0, alpha: Union[float, Callable] = 0.0,
                       r0: float = 0.05, *, r_box: Tuple[float, float] = (0.01, 0.2),
                       y_box: Tuple[float, float] = (0.0, 100.0)) -> ModelSpec:
    """Short rate ``r`` and consol price ``Y`` with dividend rate 1.

    ``mu`` and ``alpha`` are constants or callables ``(t, r, y)``. Constants
    of the nonlinear driver ``f = 1 - r y`` hold on ``r_box x y_box``; the
    forward constants are sampled there.
    """
    if not r0 > 0:
        raise InvalidInputError("initial short rate must be positive")
    if not (0 < r_box[0] < r_box[1] and y_box[0] < y_box[1]):
        raise InvalidInputError("invalid domain boxes")
    mu_f, al_f = _evaluator(mu), _evaluator(alpha)

    def b(t, x, y, z, xi):
        return mu_f(t, x, y)

    def sig(t, x, y, z, xi):
        return np.asarray(al_f(t, x, y), float)[..., None] if np.ndim(al_f(t, x, y)) else al_f(t, x, y)

    def f(t, x, y, z, xi):
        return 1.0 - x * y

    coeffs = CoefficientSet(b, sig, f, ConstantsRecord(), name="black_consol")
    est = estimate_constants(coeffs, SamplerConfig(n_pairs=2000, x_box=r_box, y_box=y_box))
    y_max = max(abs(y_box[0]), abs(y_box[1]))
    consts = est.with_(mu2=-r_box[0], c1=y_max, c2=0.0, k2=0.0, k5=0.0,
                       rho0=r_box[1], mu0=0.0, c0=0.0)
    coeffs = coeffs.with_(constants=consts)
    oracle = None
    if not callable(mu) and not callable(alpha) and mu == 0 and alpha == 0:
        oracle = lambda t, x: (1.0 / np.asarray(x, float), np.zeros(np.shape(x)))
    sp = Saddlepoint(g=lambda t, x, y: np.ones_like(x), r=lambda t, x: x)
    return ModelSpec(coeffs, "black_consol", consts, PLUS_Z, oracle, None,
                     dict(mu=mu, alpha=alpha, r0=r0), sp, np.array([r0]))


# --------------------------------------------------------------------------
# generic scalar linear model
# --------------------------------------------------------------------------


def linear_model(a: float = -0.5, by: float = 0.0, b0: float = 0.0, sigma: float = 0.2,
                 fx: float = 0.5, fy: float = -1.0, f0: float = 0.0, x0: float = 0.0,
                 drift_t: float = 0.0) -> ModelSpec:
    """``b = a x + by y + b0 + drift_t t``, ``f = fx x + fy y + f0``, constant ``sigma``."""

    def b(t, x, y, z, xi):
        return a * x + by * y + b0 + drift_t * t

    def sig(t, x, y, z, xi):
        return sigma

    def f(t, x, y, z, xi):
        return fx * x + fy * y + f0

    consts = ConstantsRecord(mu1=a, mu2=fy, c1=abs(fx), k1=abs(by))
    coeffs = CoefficientSet(b, sig, f, consts, autonomous=drift_t == 0, name="linear")
    oracle = None
    if drift_t == 0:
        try:
            orc = affine_decoupling((b0, a, by), (f0, fx, fy))
            oracle = lambda t, x, o=orc: (o.alpha * np.asarray(x, float) + o.beta,
                                          np.full(np.shape(x), o.alpha * sigma))
        except OracleUnavailableError:
            pass
    sp = Saddlepoint(g=lambda t, x, y: fx * x + f0, r=lambda t, x: np.full(np.shape(x), -fy))
    return ModelSpec(coeffs, "linear", consts, PLUS_Z, oracle, None,
                     dict(a=a, by=by, b0=b0, sigma=sigma, fx=fx, fy=fy, f0=f0, drift_t=drift_t),
                     sp, np.array([x0]))


def shifted_driver(model: ModelSpec, delta: float) -> ModelSpec:
    """Copy of ``model`` with ``f`` replaced by ``f + delta``."""
    f0 = model.coeffs.f
    coeffs = model.coeffs.with_(f=lambda t, x, y, z, xi: f0(t, x, y, z, xi) + delta,
                                name=model.coeffs.name + f"+{delta:g}")
    sp = model.saddlepoint
    if sp is not None:
        g0 = sp.g
        sp = Saddlepoint(g=lambda t, x, y, *a: g0(t, x, y, *a) + delta, r=sp.r)
    return ModelSpec(coeffs, coeffs.name, model.paper_constants, model.sign_map, None,
                     model.terminal, dict(model.params, delta=delta), sp, model.x0)


ZOO = {
    "krugman": lambda **kw: krugman_model(kw.get("gamma", 5.0), kw.get("sigma", 0.1),
                                          kw.get("m", 1.0), kw.get("x0", 0.0)),
    "dornbusch": lambda **kw: dornbusch_model(kw.get("nu", 1.0), kw.get("xi", 1.0),
                                              kw.get("vartheta", 1.0), kw.get("eta", 0.5),
                                              kw.get("phi", 0.4), kw.get("sigma", 0.1),
                                              kw.get("m", 1.0), kw.get("x0", 0.5)),
    "blanchard": lambda **kw: blanchard_model(kw.get("a1", 0.5), kw.get("a2", 0.0),
                                              kw.get("a3", 1.0), kw.get("rho", 1.0),
                                              kw.get("theta_s", 1.0), kw.get("sigma", 0.1),
                                              kw.get("i", 0.05), kw.get("g", 0.0),
                                              kw.get("c", 0.1), x0=kw.get("x0", 0.0)),
    "black_consol": lambda **kw: black_consol_model(kw.get("mu", 0.0), kw.get("alpha", 0.0),
                                                    kw.get("r0", 0.05)),
    "linear": lambda **kw: linear_model(**{k: v for k, v in kw.items()
                                           if k in ("a", "by", "b0", "sigma", "fx", "fy", "f0", "x0")}),
}


# --------------------------------------------------------------------------
# saddlepoint equivalence
# --------------------------------------------------------------------------


def rem_equivalence_residual(model: ModelSpec, solution: PathTriple) -> float:
    """``|E[int_0^T e^{-int_0^s r} g ds + e^{-int_0^T r} Y(T)] - Y(0)| / (1 + |Y(0)|)``.

    The integral uses left-endpoint sums on the solution grid; the terminal
    term accounts for the truncation condition.
    """
    sp = model.saddlepoint
    if sp is None:
        raise InvalidInputError(f"model {model.name} has no saddlepoint decomposition")
    if model.coeffs.m != 1:
        raise InvalidInputError("saddlepoint residual needs a scalar backward component")
    g, X, Y = solution.grid, solution.X, solution.Y
    dt = g.dt
    P, N = X.shape[0], g.N
    disc = np.ones(P)
    acc = np.zeros(P)
    for i in range(N):
        t = g.node(i)
        xi = None if solution.xi is None else solution.xi[:, i]
        x, y = X[:, i], Y[:, i]
        if model.coeffs.factor is not None:
            gv = np.asarray(sp.g(t, x, y, xi), float)
            rv = np.asarray(sp.r(t, x, xi), float)
        else:
            gv = np.asarray(sp.g(t, x, y), float)
            rv = np.asarray(sp.r(t, x), float)
        gv = np.broadcast_to(gv, (P, 1))[:, 0]
        rv = np.broadcast_to(rv, (P, 1))[:, 0]
        acc += disc * gv * dt
        disc *= np.exp(-rv * dt)
    acc += disc * Y[:, N, 0]
    y0 = float(Y[:, 0, 0].mean())
    return abs(float(acc.mean()) - y0) / (1 + abs(y0))
