"""Tests for the composite blend, its residual audit, and wall identities."""

import numpy as np
import pytest

from glcurrent.geometry import (boundary_preset, build_boundary,
                                interior_distance)
from glcurrent.feasibility import CurrentProfile
from glcurrent.outer import solve_zeta, solve_zeta1, outer_fields
from glcurrent.composite import (CutoffSpec, cutoff_eval, extract_stations,
                                 solve_inner_stations, composite_residuals,
                                 interior_residual_norms, assemble_composite,
                                 residuals, boundary_identity,
                                 gradient_identity, BoundaryTaylorField,
                                 _RayModel)


def two_mode_current(bnd, a1=0.12, a2=0.07):
    s = bnd.arclength
    L = bnd.total_length
    j = a1 * np.cos(2 * np.pi * s / L) + a2 * np.cos(4 * np.pi * s / L)
    return CurrentProfile.from_samples(bnd, j)


@pytest.fixture(scope='module')
def disk_sol():
    bnd = build_boundary(boundary_preset('circle', 256))
    sol = solve_zeta(bnd, two_mode_current(bnd), n=96)
    return solve_zeta1(sol)


@pytest.fixture(scope='module')
def stations(disk_sol):
    return extract_stations(disk_sol, n_stations=64)


@pytest.fixture(scope='module')
def coarse_pipeline():
    '''Coarse full pipeline: solve, stations at grid resolution, profiles.'''
    bnd = build_boundary(boundary_preset('circle', 256))
    sol = solve_zeta1(solve_zeta(bnd, two_mode_current(bnd), n=40))
    n_st = int(np.ceil(bnd.total_length / sol.ops.h)) + 1
    st = extract_stations(sol, n_stations=n_st)
    profs = solve_inner_stations(st, 1.0, n_points=1024)
    return sol, st, profs


@pytest.fixture(scope='module')
def composite(coarse_pipeline):
    sol, st, profs = coarse_pipeline
    return assemble_composite(sol, st, profs, 0.04)


class TestCutoff:
    def test_plateau_values(self):
        spec = CutoffSpec()
        assert cutoff_eval(0.5, spec) == 1.0
        assert cutoff_eval(2.5, spec) == 0.0
        assert cutoff_eval(1.0, spec) == 1.0
        assert cutoff_eval(2.0, spec) == 0.0

    def test_slope_bound_fine_sample(self):
        spec = CutoffSpec()
        x = np.linspace(0.0, 3.0, 20001)
        sl = spec.slope(x)
        assert np.max(np.abs(sl)) <= 1.5 + 1e-12
        # the bound is attained at the transition midpoint
        assert np.max(np.abs(sl)) == pytest.approx(1.5, abs=1e-6)

    def test_monotone_decreasing(self):
        spec = CutoffSpec()
        x = np.linspace(0.9, 2.1, 500)
        v = spec.value(x)
        assert np.all(np.diff(v) <= 1e-15)

    def test_delta_power_law(self):
        spec = CutoffSpec(iota=0.9)
        assert spec.delta(0.04) == pytest.approx(0.04 ** 0.9, rel=1e-15)
        assert CutoffSpec(iota=0.5).delta(0.04) == pytest.approx(0.2)

    def test_slope_consistent_with_value(self):
        spec = CutoffSpec()
        x = np.linspace(0.95, 2.05, 4001)
        v = spec.value(x)
        num = np.gradient(v, x)
        assert np.max(np.abs(num - spec.slope(x))) < 5e-3


class TestRayModel:
    def test_polynomial_exact(self):
        # degree-2 data is reproduced exactly by the degree-6 fit
        t = np.linspace(0.0, 0.2, 9)
        s = np.arange(8) * (2.0 * np.pi / 8.0)
        vals = np.outer(np.cos(s), np.ones(9)) * (1.0 + 0.5 * t - 2.0 * t ** 2)
        mod = _RayModel(vals, t, 2.0 * np.pi)
        assert np.allclose(mod.eval(0.1), np.cos(s) * (1.0 + 0.05 - 0.02),
                           atol=1e-12)
        assert np.allclose(mod.eval(0.1, dt=1), np.cos(s) * (0.5 - 0.4),
                           atol=1e-10)
        assert np.allclose(mod.eval(0.1, dt=2), np.cos(s) * (-4.0),
                           atol=1e-9)

    def test_spectral_s_derivative(self):
        t = np.linspace(0.0, 0.2, 9)
        n = 32
        s = np.arange(n) * (2.0 * np.pi / n)
        vals = np.outer(np.sin(s), 1.0 + t)
        mod = _RayModel(vals, t, 2.0 * np.pi)
        assert np.allclose(mod.eval(0.1, ds=1), np.cos(s) * 1.1, atol=1e-9)

    def test_pinned_wall_constraints(self):
        t = np.linspace(0.0, 0.2, 9)
        s = np.arange(8) * (2.0 * np.pi / 8.0)
        rng = np.random.default_rng(0)
        vals = rng.normal(size=(8, 9)) * 0.01 + 1.0
        w0 = np.full(8, 2.0)
        sl = np.full(8, -3.0)
        mod = _RayModel(vals, t, 2.0 * np.pi, fix_value=w0, fix_slope=sl)
        assert np.allclose(mod.eval(0.0), w0, atol=1e-12)
        assert np.allclose(mod.eval(0.0, dt=1), sl, atol=1e-10)


class TestStations:
    def test_station_count_and_layout(self, stations):
        assert stations.n == 64
        gaps = np.diff(stations.s)
        assert np.allclose(gaps, gaps[0])

    def test_wall_flux_condition(self, stations):
        # zeta_t = -j / rho_j^2 with rho_j the outer wall amplitude
        assert np.allclose(stations.zeta_t,
                           -stations.j / stations.rho_j ** 2, atol=1e-13)

    def test_rho_j_quartic(self, stations):
        # rho_j^4 (rho_r^2 - rho_j^2) = j^2 from the flux relation
        lhs = stations.rho_j ** 4 * (stations.rho_r ** 2 -
                                     stations.rho_j ** 2)
        assert np.allclose(lhs, stations.j ** 2, atol=1e-12)

    def test_solver_trace_agreement(self, stations):
        # the flux-implied wall slope matches the solved field's own
        # normal derivative read off the mesh
        diff = stations.mls_zeta_t - stations.zeta_t
        assert np.max(np.abs(diff)) < 2e-3

    def test_second_derivative_physical(self, stations):
        # no mesh-resonant junk: zeta_tt is O(j kappa) smooth along s
        assert np.max(np.abs(stations.zeta_tt)) < 1.0
        assert np.max(np.abs(np.diff(stations.zeta_tt, 2))) < 0.05

    def test_amplitude_models_consistent(self, stations):
        # a1 is the wall slope of the derived amplitude model
        assert np.allclose(stations.a1,
                           stations.rho00mod.eval(0.0, dt=1), atol=1e-12)
        assert np.allclose(stations.rho00mod.eval(0.0),
                           stations.rho_j, atol=1e-12)


class TestInnerStations:
    def test_profile_parameters_match(self, stations):
        profs = solve_inner_stations(stations, 2.0, n_points=512)
        assert len(profs) == stations.n
        for i in (0, 13, 40):
            assert profs[i].params.sigma0 == 2.0
            assert profs[i].params.rho_r == pytest.approx(
                float(stations.rho_r[i]))
            assert profs[i].params.dzeta_dt0 == pytest.approx(
                float(stations.zeta_t[i]))


class TestBoundaryTaylorField:
    def test_eval_polynomial(self):
        s = np.arange(8) * 0.75
        coefs = np.column_stack([np.full(8, 2.0), np.full(8, -1.0),
                                 np.full(8, 0.5)])
        fld = BoundaryTaylorField(s=s, coefs=coefs, length=6.0)
        t = 0.3
        assert fld.eval(1.5, t) == pytest.approx(2.0 - 0.3 + 0.5 * 0.09)

    def test_cyclic_interpolation(self):
        s = np.arange(4) * 1.0
        coefs = np.array([[0.0], [1.0], [2.0], [1.0]])
        fld = BoundaryTaylorField(s=s, coefs=coefs, length=4.0)
        assert fld.eval(0.5, 0.0) == pytest.approx(0.5)
        # wraps around the seam
        assert fld.eval(3.5, 0.0) == pytest.approx(0.5)


class TestAssembly:
    def test_amplitude_range(self, composite):
        m = composite.rho0.mask
        vals = composite.rho0.values[m]
        assert vals.min() > 0.0
        assert vals.max() <= 1.01

    def test_outer_equality_beyond_cutoff(self, composite, coarse_pipeline):
        sol, st, profs = coarse_pipeline
        of = outer_fields(sol, composite.eps)
        spec, mask, origin = sol.ops.grid_view()
        dist = interior_distance(sol.domain, spec, mask, origin,
                                 resample_factor=8)
        outside = mask & (dist.t.values > 2.0 * composite.eps ** 0.9)
        assert outside.sum() > 100
        assert np.array_equal(composite.rho0.values[outside],
                              of.rho_o.values[outside])
        assert np.array_equal(composite.chi0.values[outside],
                              of.chi_o.values[outside])
        assert np.all(composite.phi0.values[outside] == 0.0)

    def test_no_ring_localized_jumps(self, composite):
        # the blend must not add discontinuities at t = delta or 2 delta:
        # jumps on edges straddling the rings stay within the overall
        # jump scale of the band
        delta = composite.eps ** composite.iota
        spec = composite.grid
        sol = composite.outer
        _, mask, origin = sol.ops.grid_view()
        dist = interior_distance(sol.domain, spec, mask, origin,
                                 resample_factor=8)
        T = dist.t.values
        v = composite.rho0.values
        jump = np.abs(np.diff(v, axis=1))
        ok = mask[:, 1:] & mask[:, :-1]
        t_lo = np.minimum(T[:, 1:], T[:, :-1])
        t_hi = np.maximum(T[:, 1:], T[:, :-1])
        band_scale = jump[ok & (t_hi < 2.5 * delta)].max()
        for ring in (delta, 2.0 * delta):
            straddle = ok & (t_lo < ring) & (t_hi > ring)
            assert jump[straddle].max() <= band_scale + 1e-12

    def test_station_gap_rejection(self, coarse_pipeline):
        sol, st, profs = coarse_pipeline
        thin = extract_stations(sol, n_stations=16)
        profs16 = solve_inner_stations(thin, 1.0, n_points=512)
        with pytest.raises(ValueError, match='band resolution'):
            assemble_composite(sol, thin, profs16, 0.04)

    def test_zero_current_identity_blend(self):
        bnd = build_boundary(boundary_preset('circle', 256))
        prof = CurrentProfile.from_samples(bnd,
                                           np.zeros_like(bnd.arclength))
        sol = solve_zeta1(solve_zeta(bnd, prof, n=40))
        n_st = int(np.ceil(bnd.total_length / sol.ops.h)) + 1
        st = extract_stations(sol, n_stations=n_st)
        profs = solve_inner_stations(st, 1.0, n_points=512)
        comp = assemble_composite(sol, st, profs, 0.04)
        m = comp.rho0.mask
        assert np.max(np.abs(comp.rho0.values[m] - 1.0)) < 1e-12
        assert np.max(np.abs(comp.chi0.values[m])) < 1e-12
        assert np.max(np.abs(comp.phi0.values[m])) < 1e-12
        rep = residuals(comp)
        assert rep.h1 < 1e-10
        assert rep.div_h2 < 1e-10
        assert rep.h3 < 1e-10

    def test_taylor_fields_attached(self, composite):
        assert composite.rho_a.coefs.shape[1] == 2
        assert composite.zeta_a.coefs.shape[1] == 3
        st = composite.stations
        assert np.allclose(composite.rho_a.eval(st.s, 0.0), st.rho_j)
        assert np.allclose(composite.zeta_a.eval(st.s, 0.0), st.zeta0)

    def test_provenance(self, composite):
        assert composite.eps == 0.04
        assert composite.iota == 0.9
        assert composite.sigma0 == 1.0
        assert composite.n_stations == composite.stations.n


class TestResidualReport:
    def test_report_structure(self, composite):
        rep = residuals(comp=composite)
        assert rep.h1 > 0.0 and np.isfinite(rep.h1)
        assert rep.div_h2 > 0.0 and np.isfinite(rep.div_h2)
        assert rep.h3 > 0.0 and np.isfinite(rep.h3)
        assert rep.h1_interior == pytest.approx(
            np.hypot(rep.h1_cut, rep.h1_outer))
        assert rep.h1 == pytest.approx(
            np.sqrt(rep.h1_band ** 2 + rep.h1_interior ** 2))

    def test_gauge_balance(self, composite):
        rep = residuals(composite)
        assert rep.gauge_rel < 0.05

    def test_outer_edge_consistency(self, composite):
        # at t = 2 delta the composite h1 reduces to the outer residual
        rep = residuals(composite)
        assert rep.sup_h1_outer_check < 0.05

    def test_identities_attached(self, composite):
        rep = residuals(composite)
        assert rep.identity_conservation is not None
        assert rep.identity_gradient is not None
        assert np.isfinite(rep.identity_conservation.l2)
        assert np.isfinite(rep.identity_gradient.l2)

    def test_unresolved_layer_rejection(self, coarse_pipeline):
        sol, st, profs = coarse_pipeline
        with pytest.raises(ValueError, match='unresolved layer'):
            composite_residuals(sol, st, profs, 0.04, 1.0, n_t=12)

    def test_interior_fixed_region_eps_squared(self, disk_sol):
        # beyond every cutoff support the composite equals the outer
        # pair, whose amplitude residual factors as eps^2 G1 + eps^4 H1;
        # halving eps divides the fixed-region norm by about 4
        t_fix = 2.0 * 0.04 ** 0.9
        norms = [interior_residual_norms(disk_sol, eps, t_fix)[0]
                 for eps in (0.04, 0.02, 0.01)]
        r1 = norms[0] / norms[1]
        r2 = norms[1] / norms[2]
        assert 3.0 < r1 < 5.0
        assert 3.0 < r2 < 5.0

    def test_interior_small_versus_band(self, disk_sol, stations):
        # fixed outer region content is negligible against the band
        profs = solve_inner_stations(stations, 1.0, n_points=1024)
        rep = composite_residuals(disk_sol, stations, profs, 0.02, 1.0)
        assert rep.h1_outer / rep.h1_band < 0.1


class TestWallIdentities:
    def test_strip_path_rejected(self):
        from glcurrent.outer import PeriodicStrip
        strip = PeriodicStrip()
        sol = solve_zeta(strip, 0.3, n=48)
        with pytest.raises(TypeError, match='boundary-fitted'):
            boundary_identity(sol)

    def test_residual_small_on_solved_disk(self, disk_sol):
        ident = boundary_identity(disk_sol)
        assert ident.l2 < 0.2
        assert ident.h_b == pytest.approx(2.0 * disk_sol.ops.h)

    def test_gradient_identity_small(self, disk_sol):
        ident = gradient_identity(disk_sol)
        assert ident.l2 < 0.2

    def test_first_order_convergence(self):
        # the one-sided wall differences are first order in the ring
        # spacing: halving the mesh about halves both identity residuals
        bnd = build_boundary(boundary_preset('circle', 1024))
        s = bnd.arclength
        L = bnd.total_length
        j = (0.14 * np.cos(5 * 2 * np.pi * s / L)
             + 0.05 * np.cos(3 * 2 * np.pi * s / L))
        prof = CurrentProfile.from_samples(bnd, j)
        l2 = []
        for n in (26, 51, 101):
            sol = solve_zeta(bnd, prof, n=n)
            l2.append(boundary_identity(sol, n_modes=16).l2)
        r1 = l2[0] / l2[1]
        r2 = l2[1] / l2[2]
        assert 1.6 < r1 < 2.5
        assert 1.6 < r2 < 2.5
