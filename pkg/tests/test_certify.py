import json
import math

import numpy as np
import pytest

from lyapnet.certify import (GridBudgetError, MMethod, Verdict, accuracy_budget, build_covering_grid, build_grid,
                             certify, covering_failures, lipschitz_bound_M, max_certifiable_c, mc_audit,
                             shell_count)
from lyapnet.dynamics import curve_tracking, estimate_lipschitz, linear
from lyapnet.model import Augmentation, LyapunovNet, Psi
from lyapnet.net import Network, xavier_init
from lyapnet.risk import sample_uniform


def quad_model(d=2, alpha=1.0):
    return LyapunovNet(Network([d, 1], [np.zeros((1, d))], [np.zeros(1)], "tanh"), alpha, Augmentation.SQNORM)


def omega_delta(d, delta, n, seed):
    return sample_uniform(-np.ones(d), np.ones(d), n, delta, seed=seed).points


class TestLemmaGrid:
    def test_shell_and_count(self):
        g = build_grid(2, 0.1, 0.5)
        assert g.k == 7 and g.count == 196 and len(g.points) == 196

    def test_one_dimensional(self):
        g = build_grid(1, 0.5, 0.5)
        assert g.k == 2
        np.testing.assert_allclose(np.sort(g.points[:, 0]), [-0.75, -0.5, 0.5, 0.75])

    def test_coordinates_on_shells(self):
        g = build_grid(2, 0.1, 0.5)
        mags = np.abs(g.points)
        assert np.all(np.min(np.abs(mags[:, :, None] - g.radii[None, None, :]), axis=2) < 1e-15)

    def test_norms(self):
        g = build_grid(3, 0.2, 0.4)
        norms = np.linalg.norm(g.points, axis=1)
        assert norms.min() == pytest.approx(0.2)
        assert norms.min() >= g.radii[0]

    def test_k_monotone_in_c(self):
        ks = [shell_count(2, 0.1, c) for c in np.linspace(0.05, 0.95, 40)]
        assert all(a >= b for a, b in zip(ks, ks[1:]))

    def test_formula(self):
        assert shell_count(2, 0.1, 0.5) == math.floor(-math.log(0.1 / math.sqrt(2)) / math.log(1.5)) + 1

    def test_budget(self):
        with pytest.raises(GridBudgetError) as err:
            build_grid(4, 0.01, 0.01, budget=10_000)
        assert err.value.required > 10_000

    def test_invalid(self):
        with pytest.raises(ValueError):
            build_grid(2, 1.5, 0.5)

    def test_covering_brute_force(self):
        # expected to fail: points with a coordinate inside (-delta/sqrt(d), delta/sqrt(d)) are missed
        g = build_grid(2, 0.1, 0.5)
        assert covering_failures(g, omega_delta(2, 0.1, 100_000, 0)) == 0


class TestCoveringGrid:
    @pytest.mark.parametrize("d,delta,c", [(2, 0.1, 0.5), (2, 0.1, 0.2), (3, 0.3, 0.5), (1, 0.2, 0.3)])
    def test_covers(self, d, delta, c):
        g = build_covering_grid(d, delta, c)
        assert covering_failures(g, omega_delta(d, delta, 100_000 if d == 2 else 20_000, 1)) == 0

    def test_shifted_center(self):
        lo, hi, ctr = np.array([-1.0, -2.0]), np.array([2.0, 1.0]), np.array([0.5, -0.3])
        g = build_covering_grid(2, 0.1, 0.4, center=ctr, lower=lo, upper=hi)
        y = sample_uniform(lo, hi, 50_000, 0.1, ctr, seed=2).points
        assert covering_failures(g, y) == 0
        assert np.all(g.points >= lo) and np.all(g.points <= hi)

    def test_budget(self):
        with pytest.raises(GridBudgetError):
            build_covering_grid(4, 0.05, 0.01, budget=1000)


class TestLipschitz:
    def test_quadratic_empirical(self):
        M = lipschitz_bound_M(quad_model(), linear(-np.eye(2)), MMethod.EMPIRICAL, 100_000, 0)
        assert 5.0 <= M <= 4 * math.sqrt(2) + 1e-9

    def test_quadratic_analytic(self):
        M = lipschitz_bound_M(quad_model(), linear(-np.eye(2)), MMethod.ANALYTIC)
        assert M == pytest.approx(4 * math.sqrt(2))

    def test_quadratic_form_matches_closed_form(self):
        A = np.array([[-1.0, 2.0], [-0.5, -3.0]])
        alpha = 0.7
        S = 2 * alpha * (A + A.T)
        corners = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float)
        exact = np.linalg.norm(corners @ S.T, axis=1).max()
        M = lipschitz_bound_M(quad_model(alpha=alpha), linear(A), MMethod.EMPIRICAL, 100_000, 3)
        assert abs(M - exact) / exact < 0.05

    def test_missing_lipschitz_f(self):
        sys = curve_tracking()
        sys.lipschitz_bound = None
        with pytest.raises(ValueError, match="estimate_lipschitz"):
            lipschitz_bound_M(LyapunovNet(xavier_init([2, 4, 1], "tanh", 0), 0.5), sys, MMethod.ANALYTIC)

    def test_analytic_dominates_empirical(self):
        sys = curve_tracking()
        estimate_lipschitz(sys, 20_000, 0)
        rng = np.random.default_rng(7)
        for draw in range(20):
            psi = (Psi.SQUARE, Psi.HUBER)[draw % 2]
            aug = list(Augmentation)[draw % 3]
            phi = xavier_init([2, 8, 8, 1], "tanh", draw)
            phi = phi.with_params(np.clip(phi.get_params() + rng.uniform(-0.3, 0.3, phi.param_count), -1, 1))
            m = LyapunovNet(phi, rng.uniform(0.1, 1.0), aug, psi, 0.1, sys.equilibrium)
            emp = lipschitz_bound_M(m, sys, MMethod.EMPIRICAL, 20_000, draw, 0.05)
            assert lipschitz_bound_M(m, sys, MMethod.ANALYTIC) >= emp


class TestAccuracyBudget:
    def test_value(self):
        b = accuracy_budget(1.0, 0.01, 10.0)
        assert b.a_gamma_eps == pytest.approx(0.9) and b.eps_admissible

    def test_boundary(self):
        b = accuracy_budget(1.0, 0.1, 10.0)
        assert b.a_gamma_eps == pytest.approx(0.0, abs=1e-15) and not b.eps_admissible

    def test_dimension_narrows_range(self):
        assert accuracy_budget(1.0, 0.08, 10.0, d=2).eps_admissible is False

    def test_zero_lipschitz(self):
        with pytest.raises(ValueError):
            accuracy_budget(1.0, 0.1, 0.0)


class TestCertify:
    def test_stable_quadratic_certified(self):
        cert = certify(quad_model(), linear(-np.eye(2)), 0.1, 0.005, 0.05, MMethod.ANALYTIC)
        assert cert.verdict is Verdict.CERTIFIED
        assert cert.grid_max_residual <= 0 and cert.c < cert.gamma_bar / cert.M and cert.margin > 0
        assert cert.mc_n == 100_000 and cert.mc_violations == 0

    def test_unstable_quadratic_grid_fail(self):
        cert = certify(quad_model(), linear(np.eye(2)), 0.1, 0.005, 0.05, MMethod.ANALYTIC)
        assert cert.verdict is Verdict.GRID_FAIL and cert.grid_max_residual > 0

    def test_every_grid_point_positive_for_antistable(self):
        from lyapnet.risk import certificate_residuals
        g = build_covering_grid(2, 0.1, 0.05)
        assert np.all(certificate_residuals(quad_model(), linear(np.eye(2)), g.points, 0.05) > 0)

    def test_c_too_large_margin_fail(self):
        cert = certify(quad_model(), linear(-np.eye(2)), 0.1, 0.01, 0.05, MMethod.ANALYTIC, mc_points=0)
        assert cert.verdict is Verdict.MARGIN_FAIL and cert.c >= max_certifiable_c(cert.gamma_bar, cert.M)

    def test_kinked_psi_refused(self):
        phi = Network([2, 1], [np.array([[1.0, 0.0]])], [np.zeros(1)], "tanh")
        m = LyapunovNet(phi, 1.0, Augmentation.NORM, Psi.ABS)
        cert = certify(m, linear(-np.eye(2)), 0.2, 0.01, 0.05, MMethod.EMPIRICAL, mc_points=0, M_samples=2000)
        assert cert.psi_sign_change and cert.verdict is Verdict.MARGIN_FAIL
        assert cert.grid_max_residual <= 0

    def test_lemma_grid_noted(self):
        cert = certify(quad_model(), linear(-np.eye(2)), 0.1, 0.005, 0.05, "analytic", grid_kind="lemma",
                       mc_points=0)
        assert cert.grid_kind == "lemma" and cert.notes

    def test_budget_error(self):
        with pytest.raises(GridBudgetError):
            certify(quad_model(3), linear(-np.eye(3)), 0.01, 0.001, 0.05, "analytic", budget=1000)

    def test_json_shape(self):
        cert = certify(quad_model(), linear(-np.eye(2)), 0.1, 0.005, 0.05, "analytic", mc_points=1000)
        d = json.loads(json.dumps(cert.to_dict()))
        assert {"delta", "c", "gamma_bar", "M", "grid", "grid_max_residual", "margin", "verdict",
                "mc_audit"} <= set(d)
        assert d["verdict"] == "certified" and d["M"]["method"] == "analytic"

    def test_controlled_system_rejected(self):
        from lyapnet.dynamics import pendulum
        with pytest.raises(ValueError):
            certify(quad_model(), pendulum(), 0.1, 0.005, 0.05)


def test_mc_audit_counts():
    assert mc_audit(quad_model(), linear(-np.eye(2)), 0.1, 5000, 0) == (5000, 0)
    assert mc_audit(quad_model(), linear(np.eye(2)), 0.1, 5000, 0) == (5000, 5000)
