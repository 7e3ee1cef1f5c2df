"""Controlled systems: lambda-weighted cost, Hamiltonian, adjoint system,
maximum-principle verification and a policy optimizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bsde import BasisConfig, Regressor, backward_sweep
from .conditions import SamplerConfig, estimate_constants
from .core import BrownianBundle, CoefficientSet, ConstantsRecord, PathTriple
from .errors import InvalidInputError, NonConvergenceError
from .picard import SolveConfig, make_bundle, solve_fbsde

FD_REL = 1e-5


# --------------------------------------------------------------------------
# problem and policies
# --------------------------------------------------------------------------


@dataclass
class ControlProblem:
    """Controlled system with running cost ``h`` and initial cost ``a``.

    Evaluators take ``(t, x, y, z, u)`` with ``x`` ``(P, n)``, ``y``
    ``(P, m)``, ``z`` ``(P, m, d)``, ``u`` ``(P, k)``; ``a`` takes ``y``.
    ``grad_u_H`` may supply a closed-form control gradient of the
    Hamiltonian with the Hamiltonian's signature.
    """

    b: Callable
    sigma: Callable
    f: Callable
    h: Callable
    a: Callable
    lam: float
    control_box: Tuple[np.ndarray, np.ndarray]
    n: int = 1
    m: int = 1
    d: int = 1
    k_dim: int = 1
    grad_a: Optional[Callable] = None
    grad_u_H: Optional[Callable] = None
    name: str = "control"

    def __post_init__(self):
        lo, hi = (np.asarray(v, float).reshape(-1) for v in self.control_box)
        if lo.size != self.k_dim or hi.size != self.k_dim or np.any(lo > hi):
            raise InvalidInputError("control_box must hold k_dim lower and upper bounds")
        self.control_box = (lo, hi)

    def _shape(self, out, shape):
        return np.broadcast_to(np.asarray(out, float), shape)

    def eval(self, name, t, x, y, z, u):
        P = x.shape[0]
        shape = dict(b=(P, self.n), sigma=(P, self.n, self.d), f=(P, self.m), h=(P,))[name]
        return self._shape(getattr(self, name)(t, x, y, z, u), shape)

    def eval_a(self, y):
        return self._shape(self.a(y), (y.shape[0],))

    def eval_grad_a(self, y):
        if self.grad_a is not None:
            return self._shape(self.grad_a(y), y.shape)
        out = np.empty_like(y)
        for j in range(y.shape[1]):
            e = FD_REL * (1 + np.abs(y[:, j]))
            up, dn = y.copy(), y.copy()
            up[:, j] += e
            dn[:, j] -= e
            out[:, j] = (self.eval_a(up) - self.eval_a(dn)) / (2 * e)
        return out


@dataclass
class Policy:
    """Control law clipped to the box.

    ``affine_feedback``: ``u = Kx x + Ky y + c`` with ``params`` keys
    ``Kx`` ``(k, n)``, ``Ky`` ``(k, m)``, ``c`` ``(k,)``.
    ``open_loop_grid``: piecewise-constant ``u(t)`` with ``params`` keys
    ``times`` (left bin edges) and ``values`` ``(G, k)``.
    """

    kind: str
    params: Dict[str, np.ndarray]

    def __post_init__(self):
        if self.kind not in ("affine_feedback", "open_loop_grid"):
            raise InvalidInputError(f"unknown policy kind {self.kind!r}")
        self.params = {k: np.array(v, dtype=float) for k, v in self.params.items()}
        if self.kind == "affine_feedback":
            for key in ("Kx", "Ky", "c"):
                if key not in self.params:
                    raise InvalidInputError(f"affine policy needs {key}")
            self.params["c"] = self.params["c"].reshape(-1)
            k = self.params["c"].size
            self.params["Kx"] = self.params["Kx"].reshape(k, -1)
            self.params["Ky"] = self.params["Ky"].reshape(k, -1)
        else:
            if "times" not in self.params or "values" not in self.params:
                raise InvalidInputError("open-loop policy needs times and values")
            self.params["values"] = self.params["values"].reshape(self.params["times"].size, -1)

    @classmethod
    def affine(cls, Kx, Ky=0.0, c=0.0, k: int = 1, n: int = 1, m: int = 1) -> "Policy":
        return cls("affine_feedback", dict(
            Kx=np.broadcast_to(np.asarray(Kx, float), (k, n)),
            Ky=np.broadcast_to(np.asarray(Ky, float), (k, m)),
            c=np.broadcast_to(np.asarray(c, float), (k,))))

    # parameter vector ---------------------------------------------------
    def names(self) -> List[str]:
        if self.kind == "affine_feedback":
            return ["Kx", "Ky", "c"]
        return ["values"]

    def vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.names()])

    def with_vector(self, theta) -> "Policy":
        theta = np.asarray(theta, float)
        new, pos = dict(self.params), 0
        for k in self.names():
            sz = self.params[k].size
            new[k] = theta[pos:pos + sz].reshape(self.params[k].shape)
            pos += sz
        return Policy(self.kind, new)

    def labels(self) -> List[str]:
        out = []
        for k in self.names():
            out += [k + "".join(f"_{i}" for i in ix) for ix in np.ndindex(self.params[k].shape)]
        return out

    # evaluation ---------------------------------------------------------
    def raw(self, t, x, y) -> np.ndarray:
        if self.kind == "affine_feedback":
            p = self.params
            return x @ p["Kx"].T + y @ p["Ky"].T + p["c"]
        j = max(0, int(np.searchsorted(self.params["times"], t, side="right")) - 1)
        return np.broadcast_to(self.params["values"][j], (x.shape[0], self.params["values"].shape[1]))

    def __call__(self, t, x, y, box) -> np.ndarray:
        return np.clip(self.raw(t, x, y), box[0], box[1])

    def jacobian(self, t, x, y, box) -> np.ndarray:
        """``d u / d theta`` with shape ``(P, k, n_params)``; zero where clipped."""
        P = x.shape[0]
        raw = self.raw(t, x, y)
        inside = (raw >= box[0]) & (raw <= box[1])
        if self.kind == "affine_feedback":
            k = self.params["c"].size
            n, m = x.shape[1], y.shape[1]
            J = np.zeros((P, k, k * n + k * m + k))
            for r in range(k):
                J[:, r, r * n:(r + 1) * n] = x
                J[:, r, k * n + r * m:k * n + (r + 1) * m] = y
                J[:, r, k * n + k * m + r] = 1.0
        else:
            G, k = self.params["values"].shape
            j = max(0, int(np.searchsorted(self.params["times"], t, side="right")) - 1)
            J = np.zeros((P, k, G * k))
            for r in range(k):
                J[:, r, j * k + r] = 1.0
        return J * inside[:, :, None]


# --------------------------------------------------------------------------
# Hamiltonian and derivatives
# --------------------------------------------------------------------------


def hamiltonian(problem: ControlProblem, t, x, y, z, u, p, q, k) -> np.ndarray:
    """``<b, q> + tr(sigma^T k) - <f, p> + h + lam <x, q> + lam <y, p>`` per path."""
    b = problem.eval("b", t, x, y, z, u)
    s = problem.eval("sigma", t, x, y, z, u)
    f = problem.eval("f", t, x, y, z, u)
    h = problem.eval("h", t, x, y, z, u)
    return (np.sum(b * q, axis=1) + np.sum(s * k, axis=(1, 2)) - np.sum(f * p, axis=1) + h
            + problem.lam * (np.sum(x * q, axis=1) + np.sum(y * p, axis=1)))


def _fd(fun, arg, idx_shape):
    """Central differences of ``fun(arg) -> (P,)`` along every non-path axis."""
    out = np.empty(arg.shape)
    flat = arg.reshape(arg.shape[0], -1)
    g = out.reshape(arg.shape[0], -1)
    for j in range(flat.shape[1]):
        e = FD_REL * (1 + np.abs(flat[:, j]))
        up, dn = flat.copy(), flat.copy()
        up[:, j] += e
        dn[:, j] -= e
        g[:, j] = (fun(up.reshape(arg.shape)) - fun(dn.reshape(arg.shape))) / (2 * e)
    return out


class _HGrad:
    """Derivatives of ``H`` (open loop) or of ``H(., pi(t, x, y))`` (closed loop)."""

    def __init__(self, problem: ControlProblem, policy: Policy, closed_loop: bool):
        self.pb, self.pol, self.cl = problem, policy, closed_loop

    def _u(self, t, x, y, u):
        return self.pol(t, x, y, self.pb.control_box) if self.cl else u

    def H(self, t, x, y, z, u, p, q, k):
        return hamiltonian(self.pb, t, x, y, z, self._u(t, x, y, u), p, q, k)

    def dx(self, t, x, y, z, u, p, q, k):
        return _fd(lambda v: self.H(t, v, y, z, u, p, q, k), x, None)

    def dy(self, t, x, y, z, u, p, q, k):
        return _fd(lambda v: self.H(t, x, v, z, u, p, q, k), y, None)

    def dz(self, t, x, y, z, u, p, q, k):
        return _fd(lambda v: self.H(t, x, y, v, u, p, q, k), z, None)

    def du(self, t, x, y, z, u, p, q, k):
        if self.pb.grad_u_H is not None:
            return np.broadcast_to(np.asarray(self.pb.grad_u_H(t, x, y, z, u, p, q, k), float), u.shape)
        return _fd(lambda v: hamiltonian(self.pb, t, x, y, z, v, p, q, k), u, None)


# --------------------------------------------------------------------------
# closed-loop state and cost
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlConfig:
    """Solve settings for controlled runs (fixed truncation horizon)."""

    solve: SolveConfig = SolveConfig(lam=-0.3, dt=0.02, horizon=20.0, paths=4000, seed=0,
                                     refine_horizon=False)
    adjoint_iter: int = 20
    adjoint_tol: float = 1e-8


def closed_loop(problem: ControlProblem, policy: Policy) -> CoefficientSet:
    """Coefficients of the system driven by ``policy``; constants sampled."""
    box = problem.control_box

    def wrap(name):
        g = getattr(problem, name)
        return lambda t, x, y, z, xi=None: g(t, x, y, z, policy(t, x, y, box))

    cs = CoefficientSet(wrap("b"), wrap("sigma"), wrap("f"), ConstantsRecord(),
                        problem.n, problem.m, problem.d, name=problem.name)
    c = estimate_constants(cs, SamplerConfig(n_pairs=500))
    return cs.with_(constants=c, sigma_depends_on_z=c.k5 > 0)


@dataclass
class CostEstimate:
    value: float
    se: float
    samples: np.ndarray
    state: Optional[PathTriple]
    diagnostics: object
    coeffs: Optional[CoefficientSet] = None


def _controls(problem, policy, state: PathTriple) -> np.ndarray:
    g = state.grid
    return np.stack([policy(g.node(i), state.X[:, i], state.Y[:, i], problem.control_box)
                     for i in range(g.N + 1)], axis=1)


def solve_state(problem: ControlProblem, policy: Policy, x0, config: ControlConfig = ControlConfig()):
    """Closed-loop state triple and diagnostics.

    Raises
    ------
    NonConvergenceError
        If the state solve diverges or fails to converge.
    """
    cfg = config.solve.with_(lam=problem.lam)
    coeffs = closed_loop(problem, policy)
    triple, diag = solve_fbsde(coeffs, x0, cfg, store=True)
    if triple is None or not diag.converged:
        raise NonConvergenceError("controlled state solve did not converge")
    return triple, diag, coeffs


def cost(problem: ControlProblem, policy: Policy, x0, config: ControlConfig = ControlConfig()) -> CostEstimate:
    """Monte Carlo ``E[int_0^T e^{lam t} h dt + a(Y(0))]`` with its
    standard error (left-endpoint sums on the truncated horizon)."""
    state, diag, coeffs = solve_state(problem, policy, x0, config)
    g = state.grid
    U = _controls(problem, policy, state)
    acc = np.zeros(state.X.shape[0])
    for i in range(g.N):
        t = g.node(i)
        acc += math.exp(problem.lam * t) * problem.eval("h", t, state.X[:, i], state.Y[:, i],
                                                        state.Z[:, i], U[:, i]) * g.dt
    acc += problem.eval_a(state.Y[:, 0])
    se = float(np.std(acc, ddof=1) / math.sqrt(acc.size)) if acc.size > 1 else 0.0
    return CostEstimate(float(acc.mean()), se, acc, state, diag, coeffs)


# --------------------------------------------------------------------------
# adjoint system
# --------------------------------------------------------------------------


@dataclass
class AdjointSolution:
    """``p`` ``(P, N+1, m)`` forward, ``q`` ``(P, N+1, n)`` and ``k``
    ``(P, N+1, n, d)`` backward with ``q(T) = 0``."""

    p: np.ndarray
    q: np.ndarray
    k: np.ndarray
    q_se: np.ndarray
    k_se: np.ndarray
    iterations: int
    transversality: float
    closed_loop: bool


def adjoint_solve(problem: ControlProblem, state: PathTriple, policy: Policy,
                  bundle: BrownianBundle, *, closed_loop: bool = False,
                  basis: BasisConfig = BasisConfig(), max_iter: int = 20,
                  tol: float = 1e-8) -> AdjointSolution:
    """Solve the adjoint system along ``state``.

    ``p`` starts at ``-grad a(Y(0))`` and is integrated forward with drift
    ``-grad_y H`` and diffusion ``-grad_z H`` (row ``j`` of ``grad_z H``
    pairs with ``dW_j``); ``q`` solves the backward equation with driver
    ``grad_x H`` by regression. The two are coupled and iterated to a fixed
    point. ``closed_loop`` differentiates ``H(., pi(t, x, y))`` instead of
    ``H`` at the frozen control.
    """
    g = state.grid
    P, N, dt = state.X.shape[0], g.N, g.dt
    n, m, d = problem.n, problem.m, problem.d
    if bundle.paths != P or bundle.grid.N != N:
        raise InvalidInputError("bundle does not match the state paths")
    U = _controls(problem, policy, state)
    D = _HGrad(problem, policy, closed_loop)
    X, Y, Z = state.X, state.Y, state.Z
    p0 = -problem.eval_grad_a(Y[:, 0])
    p = np.repeat(p0[:, None, :], N + 1, axis=1)
    q = np.zeros((P, N + 1, n))
    k = np.zeros((P, N + 1, n, d))
    res = None
    for it in range(1, max_iter + 1):
        p_new = np.empty_like(p)
        p_new[:, 0] = p0
        for i in range(N):
            t = g.node(i)
            args = (t, X[:, i], Y[:, i], Z[:, i], U[:, i], p_new[:, i], q[:, i], k[:, i])
            gy, gz = D.dy(*args), D.dz(*args)
            p_new[:, i + 1] = p_new[:, i] - gy * dt - np.einsum("pmd,pd->pm", gz, bundle.increment(i))

        res = _q_sweep(state, U, D, p_new, bundle, basis)
        change = float(np.mean((p_new - p) ** 2) + np.mean((res.Y - q) ** 2))
        scale = 1.0 + float(np.mean(res.Y ** 2) + np.mean(p_new ** 2))
        p, q, k = p_new, res.Y, res.Z
        if change <= tol * scale:
            break
    wT = math.exp(problem.lam * g.T)
    trans = wT * (abs(float(np.mean(np.sum(X[:, N - 1] * q[:, N - 1], axis=1))))
                  + abs(float(np.mean(np.sum(Y[:, N] * p[:, N], axis=1)))))
    return AdjointSolution(p, q, k, res.y_se, res.z_se, it, trans, closed_loop)


def _q_regressors(state: PathTriple, p: np.ndarray):
    spread = float(np.max(np.std(p, axis=0)))
    if spread > 1e-12:
        return lambda i: np.concatenate([state.X[:, i], p[:, i]], axis=1)
    return lambda i: state.X[:, i]


def _q_sweep(state, U, D, p, bundle, basis, group_size=None, keep_fits=False, store=True):
    g = state.grid
    X, Y, Z = state.X, state.Y, state.Z
    P, n, d = X.shape[0], X.shape[2], bundle.d

    def driver(i, qv, kv):
        return D.dx(g.node(i), X[:, i], Y[:, i], Z[:, i], U[:, i], p[:, i], qv, kv)

    return backward_sweep(g, P, n, d, _q_regressors(state, p), bundle.increment, driver,
                          np.zeros((P, n)), basis, group_size=group_size,
                          keep_fits=keep_fits, store=store)


def _batch_q(state, U, D, p, bundle, basis, batches: int):
    """Per-batch regression fits of ``q``: independent estimates whose
    spread gives the standard error of the full-sample ``q``."""
    P = state.X.shape[0]
    B = max(b for b in range(2, batches + 1) if P % b == 0) if P >= 4 else 1
    if B < 2:
        return None
    res = _q_sweep(state, U, D, p, bundle, basis, group_size=P // B, keep_fits=True, store=False)
    reg = Regressor(basis, P, P // B)
    return reg, res.fits, B


def _eval_fits(reg, fit, s: np.ndarray) -> np.ndarray:
    """Every group's fitted conditional mean at regressor point ``s`` ``(q,)``."""
    (mu, sd, flat), coef = fit
    u = np.where(flat, 0.0, (s[None, None, :] - mu) / sd)[:, 0, :]
    cols = [np.ones(u.shape[0])]
    for term in reg._monomials(u.shape[1]):
        c = u[:, term[0]]
        for j in term[1:]:
            c = c * u[:, j]
        cols.append(c)
    return np.einsum("gk,gkr->gr", np.stack(cols, axis=1), coef)


def _bundle_for(coeffs: CoefficientSet, config: ControlConfig, state: PathTriple) -> BrownianBundle:
    # same keys as the state solve, so the adjoint sees the state's noise
    return make_bundle(coeffs, config.solve, state.grid.T - config.solve.t0, state.X.shape[0])


def gradient(problem: ControlProblem, policy: Policy, x0, config: ControlConfig = ControlConfig()):
    """Adjoint gradient ``E int e^{lam t} grad_u H . d pi / d theta dt`` with
    the closed-loop adjoint. Returns ``(grad, se, cost_estimate)``."""
    est = cost(problem, policy, x0, config)
    state = est.state
    bundle = _bundle_for(est.coeffs, config, state)
    adj = adjoint_solve(problem, state, policy, bundle, closed_loop=True, basis=config.solve.basis,
                        max_iter=config.adjoint_iter, tol=config.adjoint_tol)
    g = state.grid
    U = _controls(problem, policy, state)
    D = _HGrad(problem, policy, False)
    acc = np.zeros((state.X.shape[0], policy.vector().size))
    for i in range(g.N):
        t = g.node(i)
        gu = D.du(t, state.X[:, i], state.Y[:, i], state.Z[:, i], U[:, i], adj.p[:, i],
                  adj.q[:, i], adj.k[:, i])
        J = policy.jacobian(t, state.X[:, i], state.Y[:, i], problem.control_box)
        acc += math.exp(problem.lam * t) * np.einsum("pk,pkj->pj", gu, J) * g.dt
    grad = acc.mean(axis=0)
    se = acc.std(axis=0, ddof=1) / math.sqrt(acc.shape[0])
    return grad, se, est


def fd_gradient(problem: ControlProblem, policy: Policy, x0, config: ControlConfig = ControlConfig(),
                rel_step: float = 1e-3) -> np.ndarray:
    """Central finite differences of the cost on common noise."""
    theta = policy.vector()
    out = np.empty_like(theta)
    for j in range(theta.size):
        e = rel_step * (1 + abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += e
        dn[j] -= e
        out[j] = (cost(problem, policy.with_vector(up), x0, config).value
                  - cost(problem, policy.with_vector(dn), x0, config).value) / (2 * e)
    return out


# --------------------------------------------------------------------------
# maximum principle verification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VerifyConfig:
    perturbations: int = 50
    time_samples: int = 200
    u_grid: int = 33
    convexity_pairs: int = 1000
    perturbation_scale: float = 0.3
    batches: int = 16
    seed: int = 0


@dataclass
class VerifyReport:
    pointwise_ok: bool
    pointwise_max_gap: float
    pointwise_violations: int
    convexity_ok: bool
    convexity_max_gap: float
    optimality_ok: bool
    candidate_cost: float
    candidate_se: float
    perturbed_costs: List[float]
    perturbed_diff_se: List[float]
    passed: bool
    transversality: float
    details: dict = field(default_factory=dict)


def verify_max_principle(problem: ControlProblem, candidate: Policy, x0,
                         config: ControlConfig = ControlConfig(),
                         vconfig: VerifyConfig = VerifyConfig()) -> VerifyReport:
    """Check the sufficient maximum principle for ``candidate``.

    (i) At sampled ``(path, time)`` points with ``t <= T/2``, ``H`` at the
    candidate control exceeds the minimum over a ``u_grid``-point grid of the
    box by at most ``3 SE`` of that Hamiltonian difference. The standard
    error comes from the spread of independent per-batch regression fits of
    ``q``, which captures noise accumulated through the backward sweep.
    (ii) Random-midpoint convexity of ``(x, y, z, u) -> H`` at sampled
    adjoint values.
    (iii) ``J(candidate) <= J(perturbed) + 3 SE`` for random perturbations of
    the policy parameters on common noise.
    """
    rng = np.random.default_rng(vconfig.seed)
    est = cost(problem, candidate, x0, config)
    state = est.state
    g = state.grid
    P = state.X.shape[0]
    bundle = _bundle_for(est.coeffs, config, state)
    adj = adjoint_solve(problem, state, candidate, bundle, closed_loop=False, basis=config.solve.basis,
                        max_iter=config.adjoint_iter, tol=config.adjoint_tol)
    U = _controls(problem, candidate, state)
    lo, hi = problem.control_box
    axes = [np.linspace(lo[j], hi[j], vconfig.u_grid) for j in range(problem.k_dim)]
    ugrid = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)

    # (i) pointwise minimality; SE of the Hamiltonian difference from
    # independent batch fits of q (k and p enter with the full estimate)
    batch = _batch_q(state, U, _HGrad(problem, candidate, False), adj.p, bundle,
                     config.solve.basis, vconfig.batches)
    half = max(1, g.N // 2)
    ti = rng.integers(0, half + 1, vconfig.time_samples)
    pi = rng.integers(0, P, vconfig.time_samples)
    regs = _q_regressors(state, adj.p)
    gaps, viol, worst = [], 0, -math.inf
    G = ugrid.shape[0]
    rep = lambda a: np.repeat(a, G, axis=0)
    for i, pth in zip(ti, pi):
        i = int(i)
        t = g.node(i)
        sl = slice(int(pth), int(pth) + 1)
        x, y, z = state.X[sl, i], state.Y[sl, i], state.Z[sl, i]
        p, q, k = adj.p[sl, i], adj.q[sl, i], adj.k[sl, i]
        Hg = hamiltonian(problem, t, rep(x), rep(y), rep(z), ugrid, rep(p), rep(q), rep(k))
        j = int(np.argmin(Hg))
        uc, ub = U[sl, i], ugrid[j:j + 1]
        gap = float(hamiltonian(problem, t, x, y, z, uc, p, q, k)[0]) - float(Hg[j])
        se = 0.0
        if batch is not None and i < g.N:
            reg, fits, B = batch
            qb = q + _eval_fits(reg, fits[i], regs(i)[int(pth)])
            qb = qb - qb.mean(axis=0) + q
            both = np.concatenate([np.repeat(uc, B, axis=0), np.repeat(ub, B, axis=0)])
            rb = lambda a: np.repeat(a, 2 * B, axis=0)
            Hb = hamiltonian(problem, t, rb(x), rb(y), rb(z), both, rb(p),
                             np.concatenate([qb, qb]), rb(k))
            se = float(np.std(Hb[:B] - Hb[B:], ddof=1) / math.sqrt(B))
        worst = max(worst, gap - 3 * se)
        gaps.append(gap)
        if gap > 3 * se + 1e-12:
            viol += 1
    pointwise_ok = viol == 0

    # (ii) joint convexity at sampled adjoint values
    npairs = vconfig.convexity_pairs
    ii = rng.integers(0, g.N, npairs)
    pp = rng.integers(0, P, npairs)
    t_s = 0.0
    p_s, q_s, k_s = adj.p[pp, ii], adj.q[pp, ii], adj.k[pp, ii]

    def draw():
        x = state.X[rng.integers(0, P, npairs), rng.integers(0, g.N, npairs)]
        y = state.Y[rng.integers(0, P, npairs), rng.integers(0, g.N, npairs)]
        z = state.Z[rng.integers(0, P, npairs), rng.integers(0, g.N, npairs)]
        u = lo + (hi - lo) * rng.random((npairs, problem.k_dim))
        return x, y, z, u

    a1, a2 = draw(), draw()
    mid = tuple(0.5 * (u + v) for u, v in zip(a1, a2))
    Hm = hamiltonian(problem, t_s, *mid, p_s, q_s, k_s)
    Ha = hamiltonian(problem, t_s, *a1, p_s, q_s, k_s)
    Hb = hamiltonian(problem, t_s, *a2, p_s, q_s, k_s)
    cgap = Hm - 0.5 * (Ha + Hb)
    cmax = float(np.max(cgap))
    convex_ok = cmax <= 1e-9 * (1 + float(np.max(np.abs(Hm))))

    # (iii) global optimality proxy on common noise
    theta = candidate.vector()
    pert_costs, pert_se = [], []
    opt_ok = True
    for _ in range(vconfig.perturbations):
        dlt = vconfig.perturbation_scale * (1 + np.abs(theta)) * rng.standard_normal(theta.size)
        if candidate.kind == "affine_feedback":
            dlt = dlt * _free_mask_default(candidate)
        other = cost(problem, candidate.with_vector(theta + dlt), x0, config)
        diff = est.samples - other.samples
        se = float(np.std(diff, ddof=1) / math.sqrt(diff.size))
        pert_costs.append(other.value)
        pert_se.append(se)
        if est.value > other.value + 3 * se:
            opt_ok = False
    passed = pointwise_ok and convex_ok and opt_ok
    return VerifyReport(pointwise_ok, worst, viol, convex_ok, cmax, opt_ok, est.value, est.se,
                        pert_costs, pert_se, passed, adj.transversality,
                        dict(gaps=np.array(gaps), adjoint_iterations=adj.iterations))


def _free_mask_default(policy: Policy) -> np.ndarray:
    # perturb state gains and offsets; y-gains stay fixed so the perturbed
    # closed loops keep the candidate's coupling structure
    mask = np.ones(policy.vector().size)
    if policy.kind == "affine_feedback":
        kx = policy.params["Kx"].size
        ky = policy.params["Ky"].size
        if not np.any(policy.params["Ky"]):
            mask[kx:kx + ky] = 0.0
    return mask


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class OptimizeResult:
    policy: Policy
    trace: List[Tuple[int, float, float, np.ndarray]]
    budget_exhausted: bool
    gradient_norm: float


def optimize_policy(problem: ControlProblem, family: Policy, budget: int, x0,
                    config: ControlConfig = ControlConfig(), free: Optional[Sequence[bool]] = None,
                    gtol: float = 1e-5, use_fd: bool = False) -> OptimizeResult:
    """Gradient descent with Barzilai-Borwein steps and Armijo backtracking.

    ``family`` is the starting policy; ``free`` masks the parameters that
    move. The adjoint gradient is used unless it is non-finite (or
    ``use_fd``), in which case central differences take over. The trace
    holds ``(iteration, cost, se, params)`` of accepted iterates only, so
    its costs are nonincreasing.
    """
    if family.vector().size > 64:
        raise InvalidInputError("policy families are limited to 64 parameters")
    mask = np.ones(family.vector().size, bool) if free is None else np.asarray(free, bool)

    def grad_at(pol):
        if not use_fd:
            gr, _, est = gradient(problem, pol, x0, config)
            if np.all(np.isfinite(gr)):
                return gr * mask, est
        est = cost(problem, pol, x0, config)
        return fd_gradient(problem, pol, x0, config) * mask, est

    pol = family
    gr, est = grad_at(pol)
    trace = [(0, est.value, est.se, pol.vector())]
    step = 1.0 / max(1e-12, float(np.max(np.abs(gr))) + 1.0)
    prev = None
    exhausted = True
    for it in range(1, budget + 1):
        if float(np.linalg.norm(gr)) < gtol:
            exhausted = False
            break
        if prev is not None:
            s = pol.vector() - prev[0]
            yv = gr - prev[1]
            sy = float(s @ yv)
            if sy > 0:
                step = float(s @ s) / sy
        theta = pol.vector()
        accepted = False
        for _ in range(20):
            cand = pol.with_vector(theta - step * gr)
            try:
                c_est = cost(problem, cand, x0, config)
            except NonConvergenceError:
                step *= 0.5
                continue
            if c_est.value <= est.value - 1e-4 * step * float(gr @ gr):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            exhausted = False
            break
        prev = (theta, gr)
        pol = cand
        gr, est = grad_at(pol)
        trace.append((it, est.value, est.se, pol.vector()))
    return OptimizeResult(pol, trace, exhausted, float(np.linalg.norm(gr)))


# --------------------------------------------------------------------------
# linear-quadratic instance
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LQParams:
    a: float = 0.2
    beta: float = 1.0
    sigma: float = 0.3
    c: float = 1.0
    r: float = 1.0
    P: float = 1.0
    R: float = 1.0
    lam: float = -0.3
    box: float = 3.0


def lq_problem(prm: LQParams = LQParams()) -> ControlProblem:
    """``dX = (a X + beta u) dt + sigma dW``, ``f = c X - r Y``,
    ``h = P x^2 + R u^2``, ``a(y) = 0``."""

    def b(t, x, y, z, u):
        return prm.a * x + prm.beta * u

    def sig(t, x, y, z, u):
        return np.full((x.shape[0], 1, 1), prm.sigma)

    def f(t, x, y, z, u):
        return prm.c * x - prm.r * y

    def h(t, x, y, z, u):
        return prm.P * x[:, 0] ** 2 + prm.R * u[:, 0] ** 2

    def gu(t, x, y, z, u, p, q, k):
        return prm.beta * q + 2 * prm.R * u

    return ControlProblem(b, sig, f, h, lambda y: np.zeros(y.shape[0]), prm.lam,
                          (np.array([-prm.box]), np.array([prm.box])),
                          grad_a=lambda y: np.zeros_like(y), grad_u_H=gu, name="lq")


def lq_cost(K: float, x0: float, prm: LQParams = LQParams()) -> float:
    """Exact infinite-horizon cost of ``u = -K x``."""
    kap = prm.a - prm.beta * K
    lam = prm.lam
    if not (lam < 0 and lam + 2 * kap < 0):
        return math.inf
    s2 = prm.sigma ** 2
    ex = x0 ** 2 / (-lam - 2 * kap)
    noise = s2 / (-lam) / (-lam - 2 * kap)
    return (prm.P + prm.R * K ** 2) * (ex + noise)


def lq_optimal_gain(prm: LQParams = LQParams()) -> float:
    """Positive root of ``beta K^2 - (2a + lam) K - beta P / R = 0``."""
    s = 2 * prm.a + prm.lam
    return (s + math.sqrt(s * s + 4 * prm.beta ** 2 * prm.P / prm.R)) / (2 * prm.beta)


# --------------------------------------------------------------------------
# quadratic target costs and the Krugman money-supply problem
# --------------------------------------------------------------------------


def quadratic_cost(P: float = 1.0, Q: float = 0.0, R: float = 1.0, N: float = 0.0,
                   c1: float = 0.0, c2: float = 0.0):
    """Running cost ``P (x - c1)^2 + Q (y - c2)^2 + R |u|^2`` and initial
    cost ``N (y - c2)^2`` (scalar targets, first coordinates). Returns
    ``(h, a, grad_a)``."""
    if min(P, Q, R, N) < 0:
        raise InvalidInputError("cost weights must be nonnegative")

    def h(t, x, y, z, u):
        return P * (x[:, 0] - c1) ** 2 + Q * (y[:, 0] - c2) ** 2 + R * np.sum(u ** 2, axis=1)

    def a(y):
        return N * (y[:, 0] - c2) ** 2

    def grad_a(y):
        g = np.zeros_like(y)
        g[:, 0] = 2 * N * (y[:, 0] - c2)
        return g

    return h, a, grad_a


def krugman_control_problem(gamma: float = 5.0, sigma: float = 0.1, lam: float = -0.3,
                            P: float = 0.0, Q: float = 1.0, R: float = 1.0, N: float = 0.0,
                            c1: float = 0.0, c2: float = 1.0,
                            box: Tuple[float, float] = (-3.0, 3.0)) -> ControlProblem:
    """Money supply ``u`` steering the log exchange rate ``Y`` towards
    ``c2``: ``dX = sigma dW``, ``f = (u + X - Y) / gamma``."""
    if not gamma > 0:
        raise InvalidInputError("gamma must be positive")
    h, a, ga = quadratic_cost(P, Q, R, N, c1, c2)

    def b(t, x, y, z, u):
        return np.zeros_like(x)

    def sig(t, x, y, z, u):
        return np.full((x.shape[0], 1, 1), float(sigma))

    def f(t, x, y, z, u):
        return (u + x - y) / gamma

    return ControlProblem(b, sig, f, h, a, lam, (np.array([box[0]]), np.array([box[1]])),
                          grad_a=ga, name="krugman-control")


def initial_cost_convex(problem: ControlProblem, pairs: int = 1000, box: float = 2.0,
                        seed: int = 0) -> bool:
    """Random-midpoint spot check of the convexity of ``a``."""
    rng = np.random.default_rng(seed)
    y1 = rng.uniform(-box, box, (pairs, problem.m))
    y2 = rng.uniform(-box, box, (pairs, problem.m))
    mid = problem.eval_a(0.5 * (y1 + y2))
    avg = 0.5 * (problem.eval_a(y1) + problem.eval_a(y2))
    return bool(np.all(mid <= avg + 1e-12 * (1 + np.abs(avg))))
