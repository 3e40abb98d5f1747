"""Boundary parametrization, integrals, and in-domain distance tests."""

import numpy as np
import pytest

from glcurrent.geometry import (BoundaryGeometry, GridSpec, build_boundary,
                                boundary_from_csv, boundary_integral,
                                boundary_preset, build_grid, geodesic_distance,
                                interior_distance, GridGraph)

from conftest import unit_square


class TestBuildBoundary:
    @pytest.mark.parametrize('n', [32, 64, 128])
    def test_circle_curvature_second_order(self, n):
        b = build_boundary(boundary_preset('circle', n=n))
        h = 2.0 * np.pi / n
        assert np.max(np.abs(b.curvature - 1.0)) < 0.1 * h * h

    def test_circle_radius_scaling(self):
        b = build_boundary(boundary_preset('circle', n=128, radius=2.5))
        assert np.max(np.abs(b.curvature - 1.0 / 2.5)) < 1e-4
        assert b.total_length == pytest.approx(2.0 * np.pi * 2.5, rel=1e-6)

    def test_ellipse_tip_curvature(self):
        # analytic curvature of an (a, b) ellipse at (a, 0) is a / b^2
        b = build_boundary(boundary_preset('ellipse', n=512, a=2.0, b=1.0))
        i = np.argmin(np.abs(b.points[:, 0] - 2.0) + np.abs(b.points[:, 1]))
        assert b.curvature[i] == pytest.approx(2.0, rel=0.01)

    def test_stadium_straight_part_flat(self):
        b = build_boundary(boundary_preset('stadium', n=256))
        on_straight = (np.abs(b.points[:, 0]) < 0.7) & (np.abs(np.abs(b.points[:, 1]) - 1.0) < 1e-6)
        assert on_straight.sum() > 10
        assert np.max(np.abs(b.curvature[on_straight])) < 5e-3

    def test_normals_unit_and_outward(self):
        b = build_boundary(boundary_preset('circle', n=64))
        assert np.allclose(np.linalg.norm(b.normal, axis=1), 1.0, atol=1e-12)
        radial = b.points / np.linalg.norm(b.points, axis=1)[:, None]
        assert np.allclose(b.normal, radial, atol=1e-3)

    def test_acceleration_identity(self):
        # r_ss = -kappa n at the samples (periodic second difference)
        b = build_boundary(boundary_preset('circle', n=128))
        p = b.points
        ds = b.total_length / len(p)
        rss = (np.roll(p, -1, axis=0) - 2.0 * p + np.roll(p, 1, axis=0)) / ds ** 2
        assert np.allclose(rss, -b.curvature[:, None] * b.normal, atol=5e-3)

    def test_clockwise_input_normalized(self):
        ccw = boundary_preset('circle', n=64)
        b = build_boundary(ccw[::-1])
        assert b.polygon.exterior.is_ccw
        assert np.allclose(np.linalg.norm(b.normal, axis=1), 1.0)

    def test_repeated_endpoint_accepted(self):
        pts = boundary_preset('circle', n=64)
        b = build_boundary(np.vstack([pts, pts[:1]]))
        assert len(b.points) == 64

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            build_boundary(boundary_preset('circle', n=15))

    def test_open_curve_rejected(self):
        th = np.linspace(0.0, np.pi, 64)        # half circle, ends far apart
        with pytest.raises(ValueError, match='not closed'):
            build_boundary(np.column_stack([np.cos(th), np.sin(th)]))

    def test_self_intersection_rejected(self):
        th = np.linspace(0.0, 2.0 * np.pi, 64, endpoint=False)
        eight = np.column_stack([np.sin(2.0 * th), np.sin(th)])
        with pytest.raises(ValueError, match='self-intersecting|degenerate'):
            build_boundary(eight)

    def test_frame_reproduces_samples(self):
        b = build_boundary(boundary_preset('ellipse', n=128))
        r, t, n, k = b.frame(b.arclength[:10])
        assert np.allclose(r, b.points[:10], atol=1e-6)
        assert np.allclose(np.linalg.norm(t, axis=-1), 1.0)

    def test_csv_round_trip(self, tmp_path):
        pts = boundary_preset('circle', n=48)
        path = tmp_path / 'bnd.csv'
        with open(path, 'w') as f:
            f.write('x,y\n')
            for x, y in pts:
                f.write('%.17g,%.17g\n' % (x, y))
        b = boundary_from_csv(path)
        assert len(b.points) == 48
        assert b.total_length == pytest.approx(2.0 * np.pi, rel=1e-4)

    def test_csv_missing_columns(self, tmp_path):
        path = tmp_path / 'bad.csv'
        path.write_text('a,b\n0,0\n1,0\n')
        with pytest.raises(ValueError, match='x,y'):
            boundary_from_csv(path)


class TestBoundaryIntegral:
    def test_zero_field(self):
        b = build_boundary(boundary_preset('circle', n=64))
        assert boundary_integral(b, np.zeros(64)) == 0.0

    def test_unit_field_gives_length(self):
        b = build_boundary(boundary_preset('circle', n=256))
        assert boundary_integral(b, np.ones(256)) == pytest.approx(2.0 * np.pi, abs=1e-6)

    def test_partial_arc_wraps(self):
        b = build_boundary(boundary_preset('circle', n=256))
        f = np.ones(256)
        L = b.total_length
        assert boundary_integral(b, f, 0.75 * L, 0.25 * L) == pytest.approx(0.5 * L, rel=1e-9)

    def test_complementary_arcs_of_mean_free_field(self):
        b = build_boundary(boundary_preset('circle', n=256))
        j = np.cos(2.0 * np.pi * b.arclength / b.total_length)
        s1, s2 = 0.13 * b.total_length, 0.61 * b.total_length
        fwd = boundary_integral(b, j, s1, s2)
        back = boundary_integral(b, j, s2, s1)
        assert fwd + back == pytest.approx(boundary_integral(b, j), abs=1e-12)
        assert abs(fwd + back) < 1e-6

    def test_shape_mismatch_rejected(self):
        b = build_boundary(boundary_preset('circle', n=64))
        with pytest.raises(ValueError):
            boundary_integral(b, np.ones(10))


class TestGridSpec:
    def test_positive_spacing(self):
        with pytest.raises(ValueError):
            GridSpec(h=0.0, bbox=(0, 0, 1, 1))

    def test_band_resolution(self):
        with pytest.raises(ValueError, match='8 cells'):
            GridSpec(h=0.1, bbox=(0, 0, 1, 1), band_delta=0.5)
        GridSpec(h=0.01, bbox=(0, 0, 1, 1), band_delta=0.5)

    def test_mask_covers_interior(self):
        b = build_boundary(boundary_preset('circle', n=128))
        spec, mask, origin = build_grid(b, 0.05)
        xs, ys = spec.axes()
        X, Y = np.meshgrid(xs, ys)
        r = np.hypot(X, Y)
        assert np.all(r[mask] <= 1.0 + 1e-9)
        assert mask.sum() * spec.h ** 2 == pytest.approx(np.pi, rel=0.02)


class TestInteriorDistance:
    def test_disk_distance_profile(self):
        b = build_boundary(boundary_preset('circle', n=256))
        spec, mask, origin = build_grid(b, 0.02)
        df = interior_distance(b, spec, mask, origin)
        xs, ys = spec.axes()
        X, Y = np.meshgrid(xs, ys)
        r = np.hypot(X, Y)
        want = 1.0 - r[mask]
        assert np.max(np.abs(df.t.values[mask] - want)) < 2e-3

    def test_nearest_station_angle(self):
        b = build_boundary(boundary_preset('circle', n=256))
        spec, mask, origin = build_grid(b, 0.05)
        df = interior_distance(b, spec, mask, origin)
        xs, ys = spec.axes()
        X, Y = np.meshgrid(xs, ys)
        ang = np.mod(np.arctan2(Y, X), 2.0 * np.pi)
        inner = mask & (np.hypot(X, Y) > 0.2)
        err = np.abs(df.s.values[inner] - ang[inner])
        err = np.minimum(err, 2.0 * np.pi - err)
        assert np.max(err) < 0.05


@pytest.fixture(scope='module')
def dumbbell():
    b = build_boundary(boundary_preset('dumbbell', n=192, neck_halfwidth=0.1))
    spec, mask, origin = build_grid(b, 0.02)
    return b, GridGraph(b, spec, mask, origin)


class TestGeodesic:
    def test_coincident_points(self):
        b = build_boundary(boundary_preset('circle', n=64))
        assert geodesic_distance([0.1, 0.2], [0.1, 0.2], b) == 0.0

    def test_convex_square_diagonal(self):
        b = build_boundary(unit_square())
        d = geodesic_distance([0.01, 0.01], [0.99, 0.99], b)
        assert d == pytest.approx(np.hypot(0.98, 0.98), rel=1e-9)

    def test_outside_point_rejected(self):
        b = build_boundary(boundary_preset('circle', n=64))
        with pytest.raises(ValueError, match='outside'):
            geodesic_distance([2.0, 0.0], [0.0, 0.0], b)

    def test_dumbbell_detour_exceeds_euclidean(self, dumbbell):
        b, g = dumbbell
        x, y = [-1.2, 0.3], [1.2, 0.3]
        d = geodesic_distance(x, y, b, graph=g)
        assert d > np.linalg.norm(np.subtract(x, y)) + 1e-3

    def test_symmetry_and_triangle(self, dumbbell):
        b, g = dumbbell
        pts = ([-1.2, 0.3], [1.2, 0.3], [0.0, 0.0])
        d = {}
        for i in range(3):
            for k in range(3):
                if i != k:
                    d[i, k] = geodesic_distance(pts[i], pts[k], b, graph=g)
        for i, k in ((0, 1), (0, 2), (1, 2)):
            assert d[i, k] == pytest.approx(d[k, i], rel=1e-6)
        # triangle inequality with a straightening slack
        assert d[0, 1] <= d[0, 2] + d[2, 1] + 1e-6

    def test_graph_matches_networkx_dijkstra(self):
        import networkx as nx
        b = build_boundary(boundary_preset('dumbbell', n=96, neck_halfwidth=0.15))
        spec, mask, origin = build_grid(b, 0.08)
        g = GridGraph(b, spec, mask, origin)
        G = nx.from_scipy_sparse_array(g.graph)
        src = g.nearest_node([-1.2, 0.0])
        ours = g.distances_from([src])[0]
        theirs = nx.single_source_dijkstra_path_length(G, src)
        for node, dist in theirs.items():
            assert ours[node] == pytest.approx(dist, rel=1e-12)
