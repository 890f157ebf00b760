import numpy as np
import pytest

from lyapnet.dynamics import (ControlLaw, EquilibriumError, block_concat, closed_loop, curve_tracking,
                              estimate_lipschitz, linear, pendulum, refine_equilibrium, synthetic)
from lyapnet.net import Network


class TestCurveTracking:
    def test_stated_point_is_not_a_zero(self):
        sys = curve_tracking()
        np.testing.assert_allclose(sys.f(np.array([1.0, 0.0])), [0.0, 0.15], atol=1e-15)

    def test_true_equilibrium(self):
        sys = curve_tracking()
        np.testing.assert_allclose(sys.f(np.array([0.85, 0.0])), [0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(sys.equilibrium, [0.85, 0.0], atol=1e-10)
        assert np.linalg.norm(sys.f(sys.equilibrium)) <= 1e-8

    def test_quarter_turn(self):
        np.testing.assert_allclose(curve_tracking().f(np.array([1.0, np.pi / 2])), [-1.0, -6.27], atol=1e-12)

    def test_nominal_mode(self):
        np.testing.assert_array_equal(curve_tracking(equilibrium="nominal").equilibrium, [1.0, 0.0])

    def test_lipschitz_at_least_mu(self):
        assert estimate_lipschitz(curve_tracking(), 5000, 0) >= 6.42


class TestPendulum:
    def test_upright(self):
        np.testing.assert_array_equal(pendulum().f(np.zeros(2), np.zeros(1)), [0.0, 0.0])

    def test_gravity(self):
        np.testing.assert_allclose(pendulum().f(np.array([np.pi / 2, 0.0]), np.zeros(1)), [0.0, 19.64])

    def test_damping(self):
        np.testing.assert_allclose(pendulum().f(np.array([0.0, 1.0]), np.zeros(1)), [1.0, -0.1 / 0.0375])

    def test_refine(self):
        np.testing.assert_allclose(refine_equilibrium(pendulum(), [0.1, 0.0]), [0.0, 0.0], atol=1e-10)

    def test_control_jacobian(self):
        sys = pendulum()
        x = np.random.default_rng(0).uniform(-1, 1, (4, 2))
        np.testing.assert_allclose(sys.control_jac(x, np.zeros((4, 1)))[:, 1, 0], 1 / 0.0375)


class TestBlockConcat:
    def test_thirty_dims(self):
        assert block_concat(synthetic(10, 0), 3).dim == 30

    def test_single_copy_identity(self):
        base = synthetic(4, 2)
        one = block_concat(base, 1)
        x = np.random.default_rng(0).uniform(-1, 1, (1000, 4))
        np.testing.assert_array_equal(one.f(x), base.f(x))

    def test_blockwise_linear(self):
        sys = block_concat(linear(-np.eye(2)), 2)
        np.testing.assert_array_equal(sys.f(np.array([1.0, 2.0, 3.0, 4.0])), [-1, -2, -3, -4])

    def test_zero_copies(self):
        with pytest.raises(ValueError):
            block_concat(linear(-np.eye(2)), 0)

    def test_equilibrium_preserved(self):
        sys = block_concat(curve_tracking(), 2)
        assert np.linalg.norm(sys.f(sys.equilibrium)) <= 1e-8


class TestSynthetic:
    def test_origin(self):
        for seed in range(3):
            np.testing.assert_array_equal(synthetic(10, seed).f(np.zeros(10)), 0.0)

    def test_jacobian_spectrum(self):
        sys = synthetic(10, 4)
        h = 1e-6
        J = np.stack([(sys.f(h * e) - sys.f(-h * e)) / (2 * h) for e in np.eye(10)], axis=1)
        assert np.linalg.eigvals(J).real.max() <= -0.25

    def test_deterministic(self):
        x = np.random.default_rng(0).uniform(-1, 1, (1000, 5))
        np.testing.assert_array_equal(synthetic(5, 9).f(x), synthetic(5, 9).f(x))


class TestRefine:
    def test_linear(self):
        np.testing.assert_allclose(refine_equilibrium(linear(-np.eye(3)), [0.5, 0.5, 0.5]), 0.0, atol=1e-10)

    def test_no_root(self):
        sys = linear(np.zeros((1, 1)))
        sys.field = lambda x, _u=None: np.ones_like(x)
        with pytest.raises(EquilibriumError):
            refine_equilibrium(sys, [0.0])


class TestLipschitz:
    def test_identity(self):
        assert 0.99 <= estimate_lipschitz(linear(-np.eye(2)), 500, 0) <= 1.01

    def test_slope_three(self):
        assert estimate_lipschitz(linear(3 * np.eye(1)), 500, 0) == pytest.approx(3.0, rel=1e-6)

    def test_monotone_in_samples(self):
        vals = [estimate_lipschitz(curve_tracking(), n, 5) for n in (10, 100, 1000, 5000)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_records_bound(self):
        sys = curve_tracking()
        est = estimate_lipschitz(sys, 200, 0)
        assert sys.lipschitz_bound == est

    def test_linear_bound_exact(self):
        sys = linear(np.array([[0.0, 3.0], [-1.0, 0.0]]))
        assert sys.lipschitz_bound == pytest.approx(3.0)
        estimate_lipschitz(sys, 200, 0)
        assert sys.lipschitz_bound == pytest.approx(3.0)


def test_saturated_control_bounded():
    net = Network([2, 1], [np.array([[1.0, 1.0]])], [np.zeros(1)], "tanh")
    law = ControlLaw(net, 2.5)
    x = np.random.default_rng(0).uniform(-50, 50, (500, 2))
    assert np.all(np.abs(law(x)) <= 2.5)
    cl = closed_loop(pendulum(), law)
    assert cl.control_dim == 0 and cl.f(x).shape == (500, 2)
