import math

import numpy as np
import pytest

from fbsdelab.core import (BrownianBundle, CoefficientSet, ConstantsRecord, PathTriple,
                           TimeGrid, resample_grid, standard_error, weighted_norm)
from fbsdelab.errors import InvalidInputError


def _const_triple(value, grid, n=1, m=1, d=1, P=3):
    K = grid.N + 1
    return PathTriple(np.full((P, K, n), value), np.full((P, K, m), value),
                      np.full((P, K, m, d), value), grid)


class TestTimeGrid:
    def test_nodes_exact(self):
        g = TimeGrid(1.0, 3.0, 8)
        assert g.dt == 0.25
        assert g.node(3) == 1.75
        np.testing.assert_array_equal(g.times(), 1.0 + 0.25 * np.arange(9))

    @pytest.mark.parametrize("args", [(0.0, 0.0, 4), (1.0, 0.5, 4), (0.0, 1.0, 0),
                                      (0.0, 1.0, 1.5), (0.0, math.inf, 3)])
    def test_invalid(self, args):
        with pytest.raises(InvalidInputError):
            TimeGrid(*args)

    def test_from_step_rounds_horizon(self):
        g = TimeGrid.from_step(2.0, 1.0, 0.3)
        assert g.N == 3 and math.isclose(g.T, 2.9)


class TestConstantsRecord:
    @pytest.mark.parametrize("field", ["c1", "c2", "k", "k1", "k2", "k3", "k4", "k5"])
    def test_negative_lipschitz_rejected(self, field):
        with pytest.raises(InvalidInputError):
            ConstantsRecord(**{field: -0.1})

    @pytest.mark.parametrize("field", ["eps1", "eps2", "rho1", "rho2"])
    def test_auxiliary_must_be_positive(self, field):
        with pytest.raises(InvalidInputError):
            ConstantsRecord(**{field: 0.0})

    def test_forward_decoupled(self):
        assert ConstantsRecord().forward_decoupled
        assert not ConstantsRecord(k1=0.5).forward_decoupled


class TestCoefficientSet:
    def test_k5_requires_flag(self):
        z = lambda t, x, y, z, xi: 0.0
        with pytest.raises(InvalidInputError):
            CoefficientSet(z, z, z, ConstantsRecord(k5=1.0))
        CoefficientSet(z, z, z, ConstantsRecord(k5=1.0), sigma_depends_on_z=True)

    def test_broadcast_shapes(self):
        c = CoefficientSet(lambda *a: 1.0, lambda *a: 2.0, lambda *a: 3.0, ConstantsRecord(),
                           n=2, m=3, d=4)
        x, y, z = np.zeros((5, 2)), np.zeros((5, 3)), np.zeros((5, 3, 4))
        assert c.eval_b(0, x, y, z).shape == (5, 2)
        assert c.eval_sigma(0, x, y, z).shape == (5, 2, 4)
        assert c.eval_f(0, x, y, z).shape == (5, 3)


class TestWeightedNorm:
    def test_constant_integrand(self):
        g = TimeGrid(0.0, 2.0, 7)
        tr = _const_triple(1.0, g)
        assert math.isclose(weighted_norm(tr, 0.0, "X").value, 2.0, rel_tol=1e-12)

    def test_exponential_tail_tends_to_one(self):
        vals = []
        for T in (5.0, 10.0, 20.0, 40.0):
            g = TimeGrid(0.0, T, int(T * 1000))
            vals.append(weighted_norm(_const_triple(1.0, g, P=1), -1.0, "X").value)
        # left sums overshoot by about dt/2; the truncation error decays
        assert abs(vals[-1] - 1.0) < 1e-3
        assert abs(vals[-1] - 1.0) < abs(vals[0] - 1.0)

    def test_refinement_on_same_path(self, rng):
        g = TimeGrid(0.0, 1.0, 200)
        t = g.times()
        X = np.sin(3 * t)[None, :, None] + 0.1 * rng.standard_normal((1, 1, 1))
        coarse = PathTriple(X, X, X[..., None], g)
        g2 = TimeGrid(0.0, 1.0, 400)
        t2 = g2.times()
        X2 = np.sin(3 * t2)[None, :, None] + X[:, :1]  - np.sin(0.0)
        X2 = X2 - X2[:, :1] + X[:, :1]
        fine = PathTriple(X2, X2, X2[..., None], g2)
        a = weighted_norm(coarse, 0.5, "X").value
        b = weighted_norm(fine, 0.5, "X").value
        assert abs(a - b) < 5 * g.dt

    def test_homogeneous_and_additive(self, rng):
        g = TimeGrid(0.0, 2.0, 20)
        X = rng.standard_normal((4, 21, 1))
        tr = PathTriple(X, X, X[..., None], g)
        v = weighted_norm(tr, 0.3, "X").value
        tr3 = PathTriple(3 * X, X, X[..., None], g)
        assert math.isclose(weighted_norm(tr3, 0.3, "X").value, 9 * v, rel_tol=1e-12)
        g1, g2 = TimeGrid(0.0, 1.0, 10), TimeGrid(1.0, 2.0, 10)
        a = weighted_norm(PathTriple(X[:, :11], X[:, :11], X[:, :11, None], g1), 0.3, "X").value
        b = weighted_norm(PathTriple(X[:, 10:], X[:, 10:], X[:, 10:, None], g2), 0.3, "X").value
        assert math.isclose(a + b, v, rel_tol=1e-12)
        assert v >= 0

    def test_empty_batch(self):
        g = TimeGrid(0.0, 1.0, 2)
        tr = PathTriple(np.zeros((0, 3, 1)), np.zeros((0, 3, 1)), np.zeros((0, 3, 1, 1)), g)
        with pytest.raises(InvalidInputError):
            weighted_norm(tr, 0.0)

    def test_combined_is_sum(self, rng):
        g = TimeGrid(0.0, 1.0, 5)
        tr = PathTriple(rng.standard_normal((3, 6, 2)), rng.standard_normal((3, 6, 1)),
                        rng.standard_normal((3, 6, 1, 2)), g)
        parts = sum(weighted_norm(tr, -0.2, c).value for c in "XYZ")
        assert math.isclose(weighted_norm(tr, -0.2).value, parts, rel_tol=1e-12)


class TestResample:
    def test_constants_preserved(self):
        g = TimeGrid(0.0, 1.0, 2)
        out = resample_grid(_const_triple(2.5, g), TimeGrid(0.0, 1.0, 8))
        assert np.all(out.X == 2.5) and np.all(out.Y == 2.5) and np.all(out.Z == 2.5)

    def test_shared_nodes_exact(self, rng):
        g = TimeGrid(0.0, 1.0, 2)
        X = rng.standard_normal((2, 3, 1))
        Y = rng.standard_normal((2, 3, 1))
        tr = PathTriple(X, Y, Y[..., None], g)
        out = resample_grid(tr, TimeGrid(0.0, 1.0, 4))
        np.testing.assert_array_equal(out.X[:, ::2], X)
        np.testing.assert_array_equal(out.Y[:, ::2], Y)
        np.testing.assert_array_equal(out.Y[:, 1], Y[:, 0])
        np.testing.assert_allclose(out.X[:, 1], 0.5 * (X[:, 0] + X[:, 1]))

    def test_norm_change_is_order_dt(self):
        g = TimeGrid(0.0, 1.0, 50)
        X = g.times()[None, :, None]
        tr = PathTriple(X, X, X[..., None], g)
        fine = resample_grid(tr, TimeGrid(0.0, 1.0, 200))
        d = abs(weighted_norm(tr, 0.0, "X").value - weighted_norm(fine, 0.0, "X").value)
        assert d < 2 * g.dt

    def test_non_nested(self):
        g = TimeGrid(0.0, 1.0, 4)
        with pytest.raises(InvalidInputError):
            resample_grid(_const_triple(1.0, g), TimeGrid(0.0, 1.0, 6))


class TestBrownianBundle:
    def test_moments(self):
        g = TimeGrid(0.0, 1.0, 10)
        b = BrownianBundle(g, 20000, 2, seed=3)
        inc = b.increments
        se_mean = math.sqrt(g.dt / inc.shape[0])
        assert np.all(np.abs(inc.mean(axis=0)) < 3.5 * se_mean)
        var = inc.var(axis=0)
        se_var = g.dt * math.sqrt(2.0 / inc.shape[0])
        assert np.all(np.abs(var - g.dt) < 4 * se_var)

    def test_deterministic_across_threads(self):
        g = TimeGrid(0.0, 1.0, 5)
        a = BrownianBundle(g, 200000, 2, seed=42, threads=1).increments
        b = BrownianBundle(g, 200000, 2, seed=42, threads=4).increments
        np.testing.assert_array_equal(a, b)

    def test_prefix_independent_of_path_count(self):
        g = TimeGrid(0.0, 1.0, 3)
        a = BrownianBundle(g, 100, 1, seed=1).increments
        b = BrownianBundle(g, 1000, 1, seed=1).increments
        np.testing.assert_array_equal(a, b[:100])

    def test_seed_changes_noise(self):
        g = TimeGrid(0.0, 1.0, 3)
        a = BrownianBundle(g, 10, 1, seed=1).increments
        b = BrownianBundle(g, 10, 1, seed=2).increments
        assert not np.array_equal(a, b)

    def test_sharing_modes(self):
        g = TimeGrid(0.0, 1.0, 4)
        rep = BrownianBundle(g, 12, 1, seed=0, group_size=4, sharing="replicate").increments
        np.testing.assert_array_equal(rep[:4], rep[4:8])
        sp = BrownianBundle(g, 12, 1, seed=0, group_size=4, sharing="shared_past",
                            shared_before=2).increments
        assert np.all(sp[0:4, :2] == sp[0, :2])
        assert not np.all(sp[0:4, 2] == sp[0, 2])

    def test_invalid(self):
        g = TimeGrid(0.0, 1.0, 4)
        with pytest.raises(InvalidInputError):
            BrownianBundle(g, 10, 1, seed=0, group_size=3, sharing="replicate")
        with pytest.raises(InvalidInputError):
            BrownianBundle(g, 0, 1, seed=0)


def test_standard_error():
    s = np.array([1.0, 2.0, 3.0, 4.0])
    assert math.isclose(float(standard_error(s)), np.std(s, ddof=1) / 2)
