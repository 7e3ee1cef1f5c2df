import math

import numpy as np
import pytest

from fbsdelab.bsde import BasisConfig, Regressor, solve_bsde
from fbsdelab.core import CoefficientSet, ConstantsRecord, TimeGrid
from fbsdelab.errors import InvalidInputError
from fbsdelab.models import krugman_model
from fbsdelab.simulate import euler_forward, generate_brownian


def _setup(f, sigma=0.1, T=1.0, N=50, P=4000, seed=0):
    c = CoefficientSet(lambda *a: 0.0, lambda *a: sigma, f, ConstantsRecord())
    g = TimeGrid(0.0, T, N)
    b = generate_brownian(g, P, 1, seed)
    X = euler_forward(c, [0.0], None, b)
    return c, g, b, X


def test_zero_driver_zero_terminal():
    c, g, b, X = _setup(lambda *a: 0.0)
    Y, Z = solve_bsde(c, X, None, b)
    assert np.all(Y == 0) and np.all(Z == 0)


def test_constant_driver():
    c, g, b, X = _setup(lambda *a: 2.0)
    res = solve_bsde(c, X, None, b)
    t = g.times()
    np.testing.assert_allclose(res.mean_Y[:, 0], 2.0 * (g.T - t), atol=1e-5)
    assert np.max(np.abs(res.Z)) < 1e-5


def test_krugman_closed_form():
    mdl = krugman_model(5.0, 0.1, 1.0)
    g = TimeGrid(0.0, 2.0, 100)
    b = generate_brownian(g, 4000, 1, 1)
    X = euler_forward(mdl.coeffs, [0.0], None, b)
    res = solve_bsde(mdl.coeffs, X, lambda T, x: 1.0 + x, b)
    # regression noise accumulates backward as a random walk of per-step SEs
    acc = np.sqrt(np.cumsum(res.y_se[::-1, 0] ** 2))[::-1]
    err = np.sqrt(np.mean((res.Y[..., 0] - (1.0 + X[..., 0])) ** 2, axis=0))
    assert np.all(err <= 3 * acc + 1e-12)
    # standardised node errors behave like N(0, 1): chi-square mean test
    dz = (res.Z[:, :-1, 0, 0].mean(axis=0) - 0.1) / res.z_se[:-1, 0, 0]
    assert np.mean(dz ** 2) < 1 + 3 * math.sqrt(2 / dz.size)


def test_adaptedness_from_fits():
    c, g, b, X = _setup(lambda t, x, y, z, xi: np.sin(x) - 0.3 * y, sigma=0.5, N=20, P=2000)
    res = solve_bsde(c, X, lambda T, x: x ** 2, b, keep_fits=True)
    reg = Regressor(BasisConfig(), 2000)
    for i in (0, 7, 15):
        (mu, sd, flat), cy = res.fits[i]
        D, _ = reg.design(X[:, i])
        u = np.where(flat, 0.0, (X[:, i].reshape(1, 2000, 1) - mu) / sd)
        np.testing.assert_allclose(D[0, :, 1], u[0, :, 0], atol=1e-12)


def test_linearity_in_data():
    _, g, b, X = _setup(lambda *a: 0.0, sigma=0.4, N=30, P=3000)
    f1 = lambda t, x, y, z, xi: np.cos(x)
    f2 = lambda t, x, y, z, xi: 0.5 * x
    mk = lambda f: CoefficientSet(lambda *a: 0.0, lambda *a: 0.4, f, ConstantsRecord())
    p1 = lambda T, x: x ** 2
    p2 = lambda T, x: -x
    y1 = solve_bsde(mk(f1), X, p1, b).Y
    y2 = solve_bsde(mk(f2), X, p2, b).Y
    y = solve_bsde(mk(lambda *a: f1(*a) + f2(*a)), X, lambda T, x: p1(T, x) + p2(T, x), b).Y
    np.testing.assert_allclose(y, y1 + y2, atol=1e-8)


def test_martingale_residual():
    f = lambda t, x, y, z, xi: np.sin(x) - 0.5 * y
    c, g, b, X = _setup(f, sigma=0.3, N=40, P=8000)
    res = solve_bsde(c, X, lambda T, x: np.cos(x), b)
    Y, Z = res.Y[..., 0], res.Z[..., 0, 0]
    for i in range(0, 40, 8):
        dW = b.increment(i)[:, 0]
        r = Y[:, i + 1] - Y[:, i] + f(0, X[:, i], Y[:, i:i + 1], None, None)[:, 0] * g.dt - Z[:, i] * dW
        # SE of the Monte Carlo step; r itself is nearly deterministic
        se = (Y[:, i + 1] - Y[:, i]).std(ddof=1) / math.sqrt(r.size)
        assert abs(r.mean()) < 3 * se + 1e-12


def test_grouped_regression_matches_separate_solves():
    c, g, b, X = _setup(lambda t, x, y, z, xi: np.tanh(x) - y, sigma=0.3, N=10, P=400)
    grouped = solve_bsde(c, X, None, b, group_size=200).Y
    b2 = generate_brownian(g, 200, 1, 0)
    part = solve_bsde(c, X[:200], None, b2).Y
    np.testing.assert_allclose(grouped[:200], part, atol=1e-10)


def test_shape_mismatch():
    c, g, b, X = _setup(lambda *a: 0.0, P=10)
    with pytest.raises(InvalidInputError):
        solve_bsde(c, X[:5], None, b)


def test_basis_validation():
    with pytest.raises(InvalidInputError):
        BasisConfig(degree=-1)
