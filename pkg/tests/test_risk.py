import numpy as np
import pytest
from scipy import integrate

from lyapnet.dynamics import ControlLaw, linear, pendulum
from lyapnet.model import Augmentation, LyapunovNet
from lyapnet.net import Network, xavier_init
from lyapnet.risk import (RiskConfig, certificate_residuals, risk_clf, risk_dl, risk_ln, risk_nl,
                          sample_uniform)


def quad_model(d=2):
    return LyapunovNet(Network([d, 1], [np.zeros((1, d))], [np.zeros(1)], "tanh"), 1.0, Augmentation.SQNORM)


def sq_net(d=2, scale=1.0):
    """Plain network that is exactly scale * ||x||^2 (RePU of +-x_j)."""
    W1 = np.concatenate([np.eye(d), -np.eye(d)])
    return Network([d, 2 * d, 1], [W1, np.full((1, 2 * d), scale)], [np.zeros(2 * d), np.zeros(1)], "repu")


def const_net(c, d=2):
    return Network([d, 1], [np.zeros((1, d))], [np.array([c], float)], "tanh")


BOX = (-np.ones(2), np.ones(2))


class TestSampling:
    def test_mean_near_center(self):
        s = sample_uniform(*BOX, 100_000, seed=0)
        assert np.all(np.abs(s.points.mean(axis=0)) < 0.02)

    def test_exclusion(self):
        s = sample_uniform(*BOX, 10_000, 0.5, seed=1)
        assert np.linalg.norm(s.points, axis=1).min() >= 0.5
        assert np.all(np.abs(s.points) <= 1)

    def test_deterministic(self):
        a = sample_uniform(*BOX, 1000, 0.2, seed=4).points
        assert np.array_equal(a, sample_uniform(*BOX, 1000, 0.2, seed=4).points)

    def test_delta_too_large(self):
        with pytest.raises(ValueError):
            sample_uniform(*BOX, 100, 1.41, seed=0)


class TestLn:
    def test_zero_term(self):
        r = risk_ln(quad_model(), linear(-np.eye(2)), np.array([[0.3, 0.4]]), RiskConfig(gamma=1.0, gamma_bar=1.0))
        assert r.value == pytest.approx(0.0, abs=1e-15)

    def test_unit_term(self):
        r = risk_ln(quad_model(), linear(-np.eye(2)), np.array([[0.3, 0.4]]), RiskConfig(gamma=3.0))
        assert r.value == pytest.approx(1.0)
        assert r.violation_count == 1

    def test_inactive_hinge(self):
        x = sample_uniform(*BOX, 500, 0.2, seed=3).points
        r = risk_ln(quad_model(), linear(-np.eye(2)), x, RiskConfig(gamma=0.3))
        assert r.value == 0.0 and r.violation_count == 0

    def test_monotone_in_gamma(self):
        m = LyapunovNet(xavier_init([2, 8, 1], "tanh", 0), 0.5)
        x = sample_uniform(*BOX, 2000, seed=2).points
        vals = [risk_ln(m, linear(-np.eye(2)), x, RiskConfig(gamma=g, gamma_bar=0.01)).value
                for g in (0.01, 0.1, 0.5, 1.0)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_permutation_invariant(self):
        m = LyapunovNet(xavier_init([2, 8, 1], "tanh", 1), 0.5)
        x = sample_uniform(*BOX, 5000, seed=5).points
        a = risk_ln(m, linear(-np.eye(2)), x, RiskConfig(gamma=2.0)).value
        b = risk_ln(m, linear(-np.eye(2)), x[::-1], RiskConfig(gamma=2.0)).value
        assert a == pytest.approx(b, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            risk_ln(quad_model(), linear(-np.eye(3)), np.zeros((2, 2)), RiskConfig())

    def test_matches_quadrature(self):
        # (-2 r^2 + 3 r)_+^2 on [-1, 1]^2; the hinge never switches off since r <= sqrt 2 < 1.5
        exact = integrate.dblquad(lambda y, x: (3 * np.hypot(x, y) - 2 * (x * x + y * y)) ** 2,
                                  -1, 1, -1, 1, epsabs=1e-12)[0] / 4.0
        x = sample_uniform(*BOX, 1_000_000, seed=11).points
        mc = risk_ln(quad_model(), linear(-np.eye(2)), x, RiskConfig(gamma=3.0)).value
        assert abs(mc - exact) / exact < 0.01


class TestClf:
    def test_zero_control_reduces(self):
        sys = pendulum()
        zero = ControlLaw(Network([2, 1], [np.zeros((1, 2))], [np.zeros(1)], "tanh"))
        m = LyapunovNet(xavier_init([2, 6, 1], "tanh", 0), 0.2)
        x = sample_uniform(sys.lower, sys.upper, 400, seed=0).points
        auto = linear(np.eye(2))
        auto.field = lambda z, _u=None: sys.field(z, np.zeros((z.shape[0], 1)))
        cfg = RiskConfig(gamma=0.1)
        assert risk_clf(m, sys, zero, x, cfg).value == risk_ln(m, auto, x, cfg).value

    def test_saturation_bounds_control(self):
        law = ControlLaw(Network([2, 1], [np.array([[-1.0, -1.0]])], [np.zeros(1)], "tanh"), 0.7)
        x = np.random.default_rng(0).uniform(-100, 100, (200, 2))
        assert np.abs(law(x)).max() <= 0.7

    def test_hand_checked_sample(self):
        sys = pendulum()
        law = ControlLaw(Network([2, 1], [np.array([[-1.0, -1.0]])], [np.zeros(1)], "tanh"))
        m = quad_model()
        x = np.array([[0.2, -0.1]])
        u = -(0.2 - 0.1)
        acc = (0.15 * 9.82 * 0.5 * np.sin(0.2) - 0.1 * -0.1 + u) / (0.15 * 0.25)
        h = 2 * 0.2 * -0.1 + 2 * -0.1 * acc + 0.1 * np.hypot(0.2, -0.1)
        assert risk_clf(m, sys, law, x, RiskConfig(gamma=0.1)).value == pytest.approx(max(h, 0) ** 2)

    def test_dimension_mismatch(self):
        law = ControlLaw(Network([3, 1], [np.zeros((1, 3))], [np.zeros(1)], "tanh"))
        with pytest.raises(ValueError):
            risk_clf(quad_model(), pendulum(), law, np.zeros((1, 2)), RiskConfig())


class TestDl:
    def test_sandwich_satisfied(self):
        x = sample_uniform(*BOX, 500, seed=0).points
        r = risk_dl(sq_net(), linear(-np.eye(2)), x)
        assert r.value == 0.0

    def test_zero_network(self):
        # at ||x|| = 1 only the lower bound is violated (0.2^2); the orbital term gives 1
        r = risk_dl(const_net(0.0), linear(-np.eye(2)), np.array([[0.6, 0.8]]))
        assert r.value == pytest.approx(0.04 + 1.0)

    def test_above_upper_bound(self):
        r = risk_dl(sq_net(scale=25.0), linear(-np.eye(2)), np.array([[0.6, 0.8]]))
        assert r.value == pytest.approx(5.0 ** 2)

    def test_orbital_inactive(self):
        from lyapnet.risk import dl_terms
        orb, _, _ = dl_terms(sq_net(), linear(-np.eye(2)), np.array([[0.3, -0.9]]))
        assert orb[0] == pytest.approx(-0.9)


class TestNl:
    def test_quadratic_zero(self):
        x = sample_uniform(*BOX, 500, seed=0).points
        assert risk_nl(sq_net(), linear(-np.eye(2)), x).value == 0.0

    def test_negative_constant(self):
        x = sample_uniform(*BOX, 50, seed=0).points
        assert risk_nl(const_net(-1.0), linear(-np.eye(2)), x).value == pytest.approx(2.0)

    def test_accepts_lyapunov_net(self):
        x = sample_uniform(*BOX, 500, 0.05, seed=0).points
        assert risk_nl(quad_model(), linear(-np.eye(2)), x).value == 0.0
        assert risk_nl(quad_model(), linear(np.eye(2)), x).value > 0


def test_certificate_residual_unsquared():
    res = certificate_residuals(quad_model(), linear(-np.eye(2)), np.array([[0.3, 0.4]]), 0.05)
    assert res[0] == pytest.approx(-0.5 + 0.025)


def test_config_validation():
    with pytest.raises(ValueError):
        RiskConfig(gamma=0.1, gamma_bar=0.2)
    with pytest.raises(ValueError):
        RiskConfig(n_samples=0)
