import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from fbsdelab.control import (ControlConfig, ControlProblem, LQParams, Policy, VerifyConfig,
                              adjoint_solve, cost, hamiltonian, initial_cost_convex,
                              krugman_control_problem, lq_cost, lq_optimal_gain, lq_problem,
                              optimize_policy, quadratic_cost, verify_max_principle)
from fbsdelab.control import _bundle_for
from fbsdelab.errors import InvalidInputError
from fbsdelab.picard import SolveConfig

SMALL = ControlConfig(solve=SolveConfig(lam=-0.3, dt=0.05, horizon=20.0, paths=1000, seed=0,
                                        refine_horizon=False))


def _args(P, rng, n=1, m=1, d=1, k=1):
    return (rng.normal(size=(P, n)), rng.normal(size=(P, m)), rng.normal(size=(P, m, d)),
            rng.normal(size=(P, k)), rng.normal(size=(P, m)), rng.normal(size=(P, n)),
            rng.normal(size=(P, n, d)))


def _inert_problem(lam=-0.3):
    # coefficients and cost independent of state and control
    return ControlProblem(lambda *a: 0.1, lambda *a: 0.2, lambda *a: 0.3,
                          lambda t, x, y, z, u: np.ones(x.shape[0]), lambda y: np.zeros(y.shape[0]),
                          lam, (np.array([-1.0]), np.array([1.0])))


class TestHamiltonian:
    def test_zero(self):
        prob = lq_problem(LQParams(sigma=0.0))
        z = np.zeros((3, 1))
        H = hamiltonian(prob, 0.0, z, z, np.zeros((3, 1, 1)), z, z, z, np.zeros((3, 1, 1)))
        assert np.all(H == 0)

    def test_lambda_terms(self, rng):
        x, y, z, u, p, q, k = _args(10, rng)
        a = hamiltonian(lq_problem(LQParams(lam=-0.7)), 0.0, x, y, z, u, p, q, k)
        b = hamiltonian(lq_problem(LQParams(lam=0.0)), 0.0, x, y, z, u, p, q, k)
        np.testing.assert_allclose(a - b, -0.7 * (x[:, 0] * q[:, 0] + y[:, 0] * p[:, 0]),
                                   atol=1e-12)

    def test_lq_inner_products(self, rng):
        prm = LQParams()
        x, y, z, u, p, q, k = _args(10, rng)
        H = hamiltonian(lq_problem(prm), 0.0, x, y, z, u, p, q, k)
        x, y, u, p, q, k = x[:, 0], y[:, 0], u[:, 0], p[:, 0], q[:, 0], k[:, 0, 0]
        ref = ((prm.a * x + prm.beta * u) * q + prm.sigma * k - (prm.c * x - prm.r * y) * p
               + prm.P * x ** 2 + prm.R * u ** 2 + prm.lam * (x * q + y * p))
        np.testing.assert_allclose(H, ref, atol=1e-12)


class TestPolicy:
    def test_clip_and_jacobian(self):
        pol = Policy.affine(-2.0, 0.0, 0.5)
        box = (np.array([-1.0]), np.array([1.0]))
        x = np.array([[0.0], [2.0]])
        y = np.zeros((2, 1))
        np.testing.assert_allclose(pol(0.0, x, y, box)[:, 0], [0.5, -1.0])
        J = pol.jacobian(0.0, x, y, box)
        np.testing.assert_allclose(J[0, 0], [0.0, 0.0, 1.0])
        assert np.all(J[1] == 0)

    def test_vector_round_trip(self):
        pol = Policy.affine(-1.0, 0.3, 0.2)
        assert pol.labels() == ["Kx_0_0", "Ky_0_0", "c_0"]
        np.testing.assert_array_equal(pol.with_vector(pol.vector()).vector(), pol.vector())

    def test_open_loop(self):
        pol = Policy("open_loop_grid", dict(times=[0.0, 1.0], values=[[0.5], [-0.5]]))
        box = (np.array([-1.0]), np.array([1.0]))
        x = np.zeros((2, 1))
        assert pol(0.5, x, x, box)[0, 0] == 0.5 and pol(1.5, x, x, box)[0, 0] == -0.5

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            Policy("neural", {})


class TestCost:
    def test_zero_costs(self):
        prob = ControlProblem(lambda *a: 0.0, lambda *a: 0.1, lambda *a: 0.0,
                              lambda t, x, y, z, u: np.zeros(x.shape[0]),
                              lambda y: np.zeros(y.shape[0]), -0.3,
                              (np.array([-1.0]), np.array([1.0])))
        assert cost(prob, Policy.affine(0.0, 0.0, 0.5), [0.0], SMALL).value == 0.0

    def test_krugman_control_deterministic_integrand(self):
        prob = krugman_control_problem(P=0.0, Q=0.0, R=2.0)
        est = cost(prob, Policy.affine(0.0, 0.0, 1.0), [0.0], SMALL)
        dt, N = SMALL.solve.dt, int(round(SMALL.solve.horizon / SMALL.solve.dt))
        ref = 2.0 * sum(math.exp(-0.3 * i * dt) * dt for i in range(N))
        assert math.isclose(est.value, ref, rel_tol=1e-12)
        # the continuous integral differs by the left-endpoint rule only
        assert abs(est.value - 2.0 * (1 - math.exp(-6.0)) / 0.3) < dt * 2.0

    def test_lq_against_closed_form(self):
        K = lq_optimal_gain()
        est = cost(lq_problem(), Policy.affine(-K), [1.0], SMALL)
        assert abs(est.value - lq_cost(K, 1.0)) < 3 * est.se + 0.05 * lq_cost(K, 1.0)


class TestAdjoint:
    def test_inert_problem(self):
        prob = _inert_problem()
        pol = Policy.affine(0.0, 0.0, 0.0)
        est = cost(prob, pol, [0.0], SMALL)
        b = _bundle_for(est.coeffs, SMALL, est.state)
        adj = adjoint_solve(prob, est.state, pol, b)
        assert np.all(adj.p == adj.p[:, :1]) and np.max(np.abs(adj.q)) < 1e-12
        assert np.max(np.abs(adj.k)) < 1e-12

    def test_lq_against_averaged_ode(self):
        prm = LQParams()
        prob = lq_problem(prm)
        K = 0.5
        pol = Policy.affine(-K)
        cfg = ControlConfig(solve=SMALL.solve.with_(paths=4000))
        est = cost(prob, pol, [1.0], cfg)
        b = _bundle_for(est.coeffs, cfg, est.state)
        adj = adjoint_solve(prob, est.state, pol, b, closed_loop=False)
        # p(0) = -a'(Y0) = 0 and dp = -(r + lam) p dt: p stays zero
        assert np.max(np.abs(adj.p)) < 1e-12
        kap = prm.a - prm.beta * K
        T = est.state.grid.T

        def rhs(t, v):
            xbar = math.exp(kap * t)
            return [-((prm.a + prm.lam) * v[0] + 2 * prm.P * xbar)]
        sol = solve_ivp(rhs, (T, 0.0), [0.0], dense_output=True, rtol=1e-10, atol=1e-12)
        t = est.state.grid.times()
        for i in (0, 50, 100, 200):
            ref = sol.sol(t[i])[0]
            got = adj.q[:, i, 0].mean()
            se = adj.q[:, i, 0].std() / math.sqrt(4000)
            assert abs(got - ref) < 3 * se + 0.03 * abs(ref) + 1e-3


class TestVerify:
    def test_degenerate_control_passes(self):
        prob = _inert_problem()
        rep = verify_max_principle(prob, Policy.affine(0.0, 0.0, 0.3), [0.0], SMALL,
                                   VerifyConfig(perturbations=5, time_samples=20, batches=4))
        assert rep.pointwise_ok and rep.passed
        assert max(abs(c - rep.candidate_cost) for c in rep.perturbed_costs) < 1e-12


class TestOptimize:
    def test_zero_state_costs_give_zero_control(self):
        prob = krugman_control_problem(P=0.0, Q=0.0, R=1.0)
        res = optimize_policy(prob, Policy.affine(0.0, 0.0, 0.5), 10, [0.0], SMALL,
                              free=[False, False, True])
        assert abs(res.policy.params["c"][0]) < 1e-3
        costs = [c for _, c, _, _ in res.trace]
        assert all(b <= a for a, b in zip(costs, costs[1:]))

    def test_expensive_control_vanishes(self):
        # stable drift, so u = 0 keeps the weighted cost finite
        prm = LQParams(a=-0.2, R=1e4)
        assert lq_optimal_gain(prm) < 1e-3
        res = optimize_policy(lq_problem(prm), Policy.affine(-0.5, 0.0, 0.2), 10, [1.0], SMALL,
                              free=[True, False, True])
        assert abs(res.policy.params["Kx"][0, 0]) < 0.05
        assert abs(res.policy.params["c"][0]) < 0.05

    def test_parameter_limit(self):
        big = Policy("open_loop_grid", dict(times=np.arange(65.0), values=np.zeros((65, 1))))
        with pytest.raises(InvalidInputError):
            optimize_policy(lq_problem(), big, 1, [0.0], SMALL)


class TestCosts:
    def test_initial_cost_convex(self):
        assert initial_cost_convex(krugman_control_problem(N=1.0))
        nonconvex = ControlProblem(lambda *a: 0.0, lambda *a: 0.1, lambda *a: 0.0,
                                   lambda t, x, y, z, u: np.zeros(x.shape[0]),
                                   lambda y: -y[:, 0] ** 2, -0.3,
                                   (np.array([-1.0]), np.array([1.0])))
        assert not initial_cost_convex(nonconvex)

    def test_quadratic_cost_gradient(self, rng):
        _, a, ga = quadratic_cost(N=2.0, c2=1.0)
        y = rng.normal(size=(5, 1))
        e = 1e-6
        np.testing.assert_allclose(ga(y)[:, 0], (a(y + e) - a(y - e)) / (2 * e), rtol=1e-6)

    def test_negative_weights(self):
        with pytest.raises(InvalidInputError):
            quadratic_cost(R=-1.0)

    def test_lq_gain_root(self):
        prm = LQParams()
        K = lq_optimal_gain(prm)
        assert abs(prm.beta * K ** 2 - (2 * prm.a + prm.lam) * K - prm.beta * prm.P / prm.R) < 1e-12
        ks = np.linspace(K - 0.5, K + 0.5, 1001)
        assert abs(ks[np.argmin([lq_cost(k, 1.0, prm) for k in ks])] - K) < 1e-3
