import math

import numpy as np
import pytest

from fbsdelab.conditions import (SamplerConfig, estimate_constants, gamma_ratio,
                                 grid_minimize_lower, lambda_window, lambda_window_optimal,
                                 lower_bound_expression, saddlepoint_window, yin_lower_bound)
from fbsdelab.core import CoefficientSet, ConstantsRecord
from fbsdelab.errors import DecoupledSystemError, InvalidInputError


class TestGammaRatio:
    def test_numerator_is_max(self):
        assert gamma_ratio(ConstantsRecord(k1=1, k5=1)) == 1.0

    def test_zero_numerator(self):
        assert gamma_ratio(ConstantsRecord(k1=2.0)) == 0.0

    def test_decoupled(self):
        with pytest.raises(DecoupledSystemError):
            gamma_ratio(ConstantsRecord())

    def test_scaling_invariance(self):
        a = gamma_ratio(ConstantsRecord(k1=0.3, k4=0.2, k2=0.1, k5=0.05))
        b = gamma_ratio(ConstantsRecord(k1=0.9, k4=0.6, k2=0.3, k5=0.15))
        assert math.isclose(a, b, rel_tol=1e-12)


class TestLambdaWindow:
    def test_lower_zero_without_f_dependence(self):
        w = lambda_window(ConstantsRecord(k1=1.0))
        assert w.lower == 0.0

    def test_substitution(self):
        w = lambda_window(ConstantsRecord(mu1=-5.0, k1=1e-300))
        assert w.lower == 0.0 and math.isclose(w.upper, 10.0)
        assert w.feasible

    def test_constraint_violation_is_not_an_exception(self):
        w = lambda_window(ConstantsRecord(c2=2.0, rho2=1.0, k1=1.0))
        assert not w.constraint_ok and not w.feasible

    def test_random_matches_expression(self, rng):
        for _ in range(50):
            c = ConstantsRecord(mu2=rng.normal(), c1=rng.uniform(0, 2), c2=rng.uniform(0, 0.5),
                                k1=rng.uniform(0, 1), k2=rng.uniform(0, 1), rho1=rng.uniform(1, 3),
                                rho2=rng.uniform(1, 3))
            w = lambda_window(c)
            if w.constraint_ok:
                ref = lower_bound_expression(c.mu2, c.c1, c.c2, w.gamma, c.rho1, c.rho2)
                assert math.isclose(w.lower, float(ref), rel_tol=1e-12)

    def test_feasible_implies_positive_contraction_rates(self, rng):
        for _ in range(200):
            c = ConstantsRecord(mu1=rng.uniform(-5, 0), mu2=rng.uniform(-3, 0),
                                c1=rng.uniform(0, 1), c2=rng.uniform(0, 0.3), k1=rng.uniform(0, 0.5),
                                k2=rng.uniform(0, 0.2), k3=rng.uniform(0, 0.2),
                                rho1=rng.uniform(1, 2), rho2=rng.uniform(1, 2))
            w = lambda_window(c)
            if not w.feasible:
                continue
            for lam in np.linspace(w.lower, w.upper, 7)[1:-1]:
                assert -lam - 2 * c.mu1 - c.k3 - c.k1 * c.eps1 - c.k2 * c.eps2 > 0
                assert lam - 2 * c.mu2 - c.c1 * c.rho1 - c.c2 * c.rho2 > 0


class TestOptimalWindow:
    def test_paper_instance(self):
        c = ConstantsRecord(c1=1.0, k2=1.0)
        w = lambda_window_optimal(c, gamma=1.0)
        assert abs(w.lower - 3.0) < 1e-12
        assert abs(yin_lower_bound(c) - 5.0) < 1e-12

    def test_c2_only(self):
        w = lambda_window_optimal(ConstantsRecord(c2=1.0, k1=1.0))
        assert math.isclose(w.lower, 1.0)

    def test_rho2_floor(self):
        w = lambda_window_optimal(ConstantsRecord(c1=1.0, k1=1.0))
        assert w.gamma == 0.0 and w.rho2_used == 1e-9
        assert math.isclose(w.lower, 2.0)

    def test_never_above_any_rho_choice(self, rng):
        for _ in range(30):
            c = ConstantsRecord(mu2=rng.normal(), c1=rng.uniform(0, 2), c2=rng.uniform(0, 1),
                                k1=rng.uniform(0, 1), k2=rng.uniform(0, 1))
            w = lambda_window_optimal(c)
            r = np.exp(np.linspace(math.log(1e-3), math.log(1e3), 120))
            R1, R2 = np.meshgrid(r, r, indexing="ij")
            vals = lower_bound_expression(c.mu2, c.c1, c.c2, w.gamma, R1, R2)
            assert w.lower <= np.min(vals) + 1e-9 * (1 + abs(w.lower))

    def test_grid_oracle_agrees(self, rng):
        B = 40
        mu2, c1 = rng.normal(size=B), rng.uniform(0.01, 2, B)
        c2, g = rng.uniform(0.01, 1, B), rng.uniform(0.01, 1, B)
        val, _, _ = grid_minimize_lower(mu2, c1, c2, g)
        closed = 2 * mu2 + 2 * c1 + 2 * c1 * c2 * np.sqrt(g) + c1 ** 2 * g + c2 ** 2
        np.testing.assert_allclose(val, closed, rtol=1e-6, atol=1e-9)

    def test_yin(self):
        assert yin_lower_bound(ConstantsRecord()) == 1.0


class TestSaddlepointWindow:
    def test_zero(self):
        assert saddlepoint_window(ConstantsRecord(rho0=0, mu0=0, c0=0)).lower == 0.0

    def test_substitution(self):
        w = saddlepoint_window(ConstantsRecord(rho0=0.1, mu0=0.0, c0=1.0))
        assert math.isclose(w.lower, 2.2)

    def test_consistent_with_general_window(self):
        c = ConstantsRecord(rho0=0.3, mu0=0.1, c0=0.7, rho1=1.3, k1=0.5)
        sp = saddlepoint_window(c)
        gen = lambda_window(ConstantsRecord(mu2=c.rho0 + c.mu0, c1=c.c0, rho1=1.3, k1=0.5), gamma=0.0)
        assert math.isclose(sp.lower - 2 * c.rho0 - 2 * c.mu0,
                            gen.lower - 2 * (c.rho0 + c.mu0), rel_tol=1e-12)

    def test_missing(self):
        with pytest.raises(InvalidInputError):
            saddlepoint_window(ConstantsRecord())


class TestEstimateConstants:
    def _cs(self, b, sig, f, **kw):
        return CoefficientSet(b, sig, f, ConstantsRecord(), **kw)

    def test_linear_driver(self):
        cs = self._cs(lambda t, x, y, z, xi: 0.0, lambda t, x, y, z, xi: 0.3,
                      lambda t, x, y, z, xi: -y)
        c = estimate_constants(cs, SamplerConfig(n_pairs=2000))
        assert c.mu2 <= -1 + 1e-9 and c.c1 < 1e-12 and c.c2 < 1e-12
        assert c.k3 < 1e-12 and c.k4 < 1e-12 and c.k5 == 0.0

    def test_lipschitz_in_y(self):
        cs = self._cs(lambda t, x, y, z, xi: 2 * y, lambda t, x, y, z, xi: 0.3,
                      lambda t, x, y, z, xi: -y)
        c = estimate_constants(cs)
        assert 2 - 1e-6 <= c.k1 <= 2 + 1e-12

    def test_lower_bound_for_nonlinear(self):
        cs = self._cs(lambda t, x, y, z, xi: np.sin(y), lambda t, x, y, z, xi: 0.3,
                      lambda t, x, y, z, xi: -y)
        assert estimate_constants(cs).k1 <= 1.0 + 1e-12
