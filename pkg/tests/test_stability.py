"""Closed-form eigenvalue checks and dynamics cross-validation for stability.py."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glcurrent.stability import (StabilityInput, BlowupError, eigenvalues,
                                 lambda_minus_zero, stability_threshold,
                                 stability_verdict, eigenvector_residual,
                                 evolve_1d)

INV_SQRT3 = 1.0 / np.sqrt(3.0)


class TestEigenvalues:
    def test_zero_current_zero_mode(self):
        # beta = 0, sigma = 1, gamma = 0: rates reduce to (1, 2) by hand
        m = eigenvalues(0.0, 1.0, 0.0)
        assert m.lambda_minus == pytest.approx(1.0, abs=1e-14)
        assert m.lambda_plus == pytest.approx(2.0, abs=1e-14)
        assert m.degenerate

    def test_frozen_slow_branch_value(self):
        # regression anchor at the dynamics cross-check point
        gamma1 = 0.02 * np.pi
        m = eigenvalues(0.5, 1.0, gamma1)
        assert m.lambda_minus == pytest.approx(0.18312923242752788, abs=1e-13)
        assert m.lambda_plus == pytest.approx(2.0747664510933435, abs=1e-13)

    def test_ordering_and_reality(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            b = rng.uniform(0.0, 0.95)
            s = 10.0 ** rng.uniform(-1.0, 1.7)
            g = rng.uniform(0.0, 3.0)
            m = eigenvalues(b, s, g)
            assert m.discriminant >= 0.0
            assert np.isfinite(m.lambda_minus) and np.isfinite(m.lambda_plus)
            assert m.lambda_minus <= m.lambda_plus

    def test_grid_discriminant_nonnegative(self):
        # deterministic 1000-point (beta, sigma, gamma) grid
        betas = np.linspace(0.0, 0.95, 10)
        sigmas = np.logspace(-1.0, 1.7, 10)
        gammas = np.linspace(0.0, 3.0, 10)
        for b in betas:
            for s in sigmas:
                for g in gammas:
                    m = eigenvalues(b, s, g)
                    assert m.discriminant >= 0.0
                    assert np.isfinite(m.lambda_minus)

    def test_mixing_constants_distinct(self):
        m = eigenvalues(0.4, 2.0, 0.3)
        assert not m.degenerate
        assert m.A_plus != m.A_minus

    @given(st.floats(0.01, 0.9), st.floats(0.2, 20.0), st.floats(0.01, 2.0))
    @settings(max_examples=80, deadline=None)
    def test_modes_satisfy_linearization(self, beta, sigma, gamma):
        assert eigenvector_residual(beta, sigma, gamma, branch='minus') < 1e-8
        assert eigenvector_residual(beta, sigma, gamma, branch='plus') < 1e-8


class TestThreshold:
    @pytest.mark.parametrize('sigma', [0.5, 1.0, 5.0, 50.0])
    def test_bisection_hits_inv_sqrt3(self, sigma):
        assert abs(stability_threshold(sigma) - INV_SQRT3) < 1e-10

    def test_zero_mode_limit_matches_small_gamma(self):
        for b, s in [(0.3, 1.0), (0.5, 2.0), (0.7, 0.6)]:
            lim = lambda_minus_zero(b, s)
            near = eigenvalues(b, s, 1e-6).lambda_minus
            assert near == pytest.approx(lim, abs=1e-9)

    def test_sign_change_across_threshold(self):
        for s in (0.5, 1.0, 5.0, 50.0):
            assert lambda_minus_zero(INV_SQRT3 - 0.01, s) > 0.0
            assert lambda_minus_zero(INV_SQRT3 + 0.01, s) < 0.0

    def test_verdict_scan(self):
        verdict, min_lam, modes = stability_verdict(0.5, 1.0)
        assert verdict == 'stable'
        assert min_lam > 0.0
        assert len(modes) == 8
        verdict, min_lam, _ = stability_verdict(0.65, 1.0)
        assert verdict == 'unstable'
        assert min_lam < 0.0


class TestEvolution:
    def test_steady_state_preserved(self):
        si = StabilityInput(beta=0.5, sigma=1.0)
        r = evolve_1d(si, amplitude=0.0, T=5.0)
        assert r.drift < 1e-8
        assert r.gauge_avg_max < 1e-12

    def test_decay_rate_matches_closed_form(self):
        si = StabilityInput(beta=0.5, sigma=1.0)
        r = evolve_1d(si, mode=1, T=20.0)
        lam = eigenvalues(0.5, 1.0, si.gamma(1)).lambda_minus
        assert r.fitted_rate == pytest.approx(-lam, rel=0.1)

    def test_growth_above_threshold(self):
        si = StabilityInput(beta=0.65, sigma=1.0)
        r = evolve_1d(si, mode=1, T=20.0)
        lam = eigenvalues(0.65, 1.0, si.gamma(1)).lambda_minus
        assert lam < 0.0
        assert r.fitted_rate > 0.0
        assert r.fitted_rate == pytest.approx(-lam, rel=0.1)

    def test_blowup_reported_with_suggested_dt(self):
        si = StabilityInput(beta=0.5, sigma=1.0)
        with pytest.raises(BlowupError) as exc:
            evolve_1d(si, mode=1, amplitude=0.5, T=10.0, dt=0.8, n_cells=100)
        assert exc.value.suggested_dt == pytest.approx(0.2)

    def test_custom_perturbation_shape_validated(self):
        si = StabilityInput(beta=0.5, sigma=1.0)
        with pytest.raises(ValueError):
            evolve_1d(si, perturbation=np.zeros(7), T=1.0)


class TestInputValidation:
    def test_beta_range(self):
        with pytest.raises(ValueError):
            StabilityInput(beta=1.0, sigma=1.0)
        with pytest.raises(ValueError):
            StabilityInput(beta=-0.1, sigma=1.0)

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            StabilityInput(beta=0.5, sigma=0.0)

    def test_gamma_formula(self):
        si = StabilityInput(beta=0.5, sigma=1.0, l=2.0, eps=0.04)
        assert si.gamma(3) == pytest.approx(0.04 * 3 * np.pi / 2.0)
