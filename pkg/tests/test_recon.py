"""Triangulation and gridding against brute-force oracles."""

import numpy as np
import pytest

from stereoforge.densematch import match_dense
from stereoforge.errors import DomainError, GeometryError
from stereoforge.geom import Ray, unit
from stereoforge.ingest import DEFAULT_NODATA, PointCloud
from stereoforge.recon import (
    GriddingParams,
    cloud_from_disparity,
    extent_of,
    grid_dem,
    triangulate,
    triangulate_many,
)


def brute_force_closest(o1, d1, o2, d2, s_max=10.0, n=2001):
    """Grid search over both ray parameters for the minimum separation."""
    s = np.linspace(0.0, s_max, n)
    p1 = o1[None, :] + s[:, None] * d1[None, :]
    p2 = o2[None, :] + s[:, None] * d2[None, :]
    d2mat = np.linalg.norm(p1[:, None, :] - p2[None, :, :], axis=2)
    i, j = np.unravel_index(np.argmin(d2mat), d2mat.shape)
    return p1[i], p2[j], d2mat[i, j]


class TestTriangulate:
    def test_rays_through_common_point(self):
        target = np.array([1.0, 2.0, 3.0])
        o1 = np.array([0.0, 0.0, 10.0])
        o2 = np.array([5.0, 0.0, 10.0])
        tri = triangulate(Ray(o1, unit(target - o1)), Ray(o2, unit(target - o2)))
        np.testing.assert_allclose(tri.position, target, atol=1e-9)
        assert tri.ray_miss_distance == pytest.approx(0.0, abs=1e-9)

    def test_perpendicular_skew_rays(self):
        r1 = Ray(np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
        r2 = Ray(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
        tri = triangulate(r1, r2)
        np.testing.assert_allclose(tri.position, [0.5, 0.0, 0.0], atol=1e-12)
        assert tri.ray_miss_distance == pytest.approx(1.0, abs=1e-12)
        # brute-force confirmation of the closest points
        p1, p2, dist = brute_force_closest(r1.origin, r1.direction, r2.origin, r2.direction)
        np.testing.assert_allclose(p1, [0.0, 0.0, 0.0], atol=1e-2)
        np.testing.assert_allclose(p2, [1.0, 0.0, 0.0], atol=1e-2)
        assert dist == pytest.approx(1.0, abs=1e-4)

    def test_random_skew_pairs_match_grid_search(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            o1 = rng.uniform(-2, 2, 3)
            o2 = rng.uniform(-2, 2, 3)
            d1 = unit(rng.normal(size=3))
            d2 = unit(rng.normal(size=3))
            if abs(np.dot(d1, d2)) > 0.95:
                continue
            tri = triangulate(Ray(o1, d1), Ray(o2, d2))
            _, _, dist = brute_force_closest(o1, d1, o2, d2, s_max=12.0, n=4001)
            if tri.ray_miss_distance > 1e-6:  # interior optimum reachable by grid
                assert tri.ray_miss_distance == pytest.approx(dist, abs=1e-2)

    def test_parallel_rays_raise(self):
        r1 = Ray(np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
        r2 = Ray(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(GeometryError):
            triangulate(r1, r2)

    def test_swap_symmetry(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            o1, o2 = rng.normal(size=(2, 3))
            d1 = unit(rng.normal(size=3))
            d2 = unit(rng.normal(size=3))
            if abs(np.dot(d1, d2)) > 1 - 1e-9:
                continue
            a = triangulate(Ray(o1, d1), Ray(o2, d2))
            b = triangulate(Ray(o2, d2), Ray(o1, d1))
            np.testing.assert_allclose(a.position, b.position, atol=1e-12)
            assert a.ray_miss_distance == pytest.approx(b.ray_miss_distance, abs=1e-12)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(2)
        o1 = rng.normal(size=(20, 3))
        o2 = rng.normal(size=(20, 3))
        d1 = rng.normal(size=(20, 3))
        d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
        d2 = rng.normal(size=(20, 3))
        d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
        pos, miss = triangulate_many(o1, d1, o2, d2)
        for k in range(20):
            if abs(np.dot(d1[k], d2[k])) > 1 - 1e-9:
                assert np.isinf(miss[k])
                continue
            tri = triangulate(Ray(o1[k], d1[k]), Ray(o2[k], d2[k]))
            np.testing.assert_allclose(pos[k], tri.position, atol=1e-10)
            assert miss[k] == pytest.approx(tri.ray_miss_distance, abs=1e-10)


def grid_oracle(cloud, params, extent, nodata=DEFAULT_NODATA, weight_scale=1.0):
    """Naive O(cells x points) IDW gridding."""
    x_min, y_min, x_max, y_max = extent
    cell = params.cell_size
    n_cols = max(1, round((x_max - x_min) / cell))
    n_rows = max(1, round((y_max - y_min) / cell))
    eps = cell / 100.0
    out = np.full((n_rows, n_cols), nodata)
    top = y_min + n_rows * cell
    for r in range(n_rows):
        for c in range(n_cols):
            cx = x_min + (c + 0.5) * cell
            cy = top - (r + 0.5) * cell
            wsum = wzsum = 0.0
            count = 0
            for p, z in zip(cloud.points[:, :2], cloud.points[:, 2]):
                d = np.sqrt((p[0] - cx) ** 2 + (p[1] - cy) ** 2)
                if d <= params.radius:
                    w = weight_scale / (d + eps) ** params.idw_power
                    wsum += w
                    wzsum += w * z
                    count += 1
            if count >= params.min_samples:
                out[r, c] = wzsum / wsum
    return out


def random_cloud(n=1000, seed=0, span=10.0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack(
        [rng.uniform(0, span, n), rng.uniform(0, span, n), rng.normal(50.0, 5.0, n)]
    )
    return PointCloud(pts)


class TestGridDem:
    def test_single_point_at_cell_center(self):
        cloud = PointCloud(np.array([[0.5, 0.5, 12.25]]))
        dem = grid_dem(cloud, GriddingParams(cell_size=1.0), (0.0, 0.0, 1.0, 1.0))
        assert dem.values[0, 0] == pytest.approx(12.25, abs=1e-12)

    def test_two_equidistant_points_average(self):
        cloud = PointCloud(np.array([[0.2, 0.5, 2.0], [0.8, 0.5, 4.0]]))
        dem = grid_dem(cloud, GriddingParams(cell_size=1.0), (0.0, 0.0, 1.0, 1.0))
        assert dem.values[0, 0] == pytest.approx(3.0, abs=1e-12)

    def test_matches_brute_force_oracle(self):
        cloud = random_cloud()
        params = GriddingParams(cell_size=1.0, search_radius=2.0)
        extent = (0.0, 0.0, 10.0, 10.0)
        dem = grid_dem(cloud, params, extent)
        oracle = grid_oracle(cloud, params, extent)
        np.testing.assert_allclose(dem.values, oracle, atol=1e-9)

    def test_backend_parity(self, monkeypatch):
        cloud = random_cloud(seed=3)
        params = GriddingParams(cell_size=0.5)
        extent = (0.0, 0.0, 10.0, 10.0)
        a = grid_dem(cloud, params, extent)
        monkeypatch.setenv("STEREOFORGE_NUMBA", "0")
        b = grid_dem(cloud, params, extent)
        np.testing.assert_allclose(a.values, b.values, atol=1e-10)
        assert np.array_equal(a.valid, b.valid)

    def test_values_within_contributor_range(self):
        cloud = random_cloud(seed=5)
        dem = grid_dem(cloud, GriddingParams(cell_size=1.0), (0.0, 0.0, 10.0, 10.0))
        lo, hi = cloud.points[:, 2].min(), cloud.points[:, 2].max()
        v = dem.values[dem.valid]
        assert v.min() >= lo - 1e-12 and v.max() <= hi + 1e-12

    def test_larger_radius_never_adds_nodata(self):
        cloud = random_cloud(n=60, seed=8)
        extent = (0.0, 0.0, 10.0, 10.0)
        smaller = grid_dem(cloud, GriddingParams(1.0, search_radius=1.0), extent)
        larger = grid_dem(cloud, GriddingParams(1.0, search_radius=3.0), extent)
        assert np.all(larger.valid | ~smaller.valid)

    def test_weight_scale_invariance(self):
        cloud = random_cloud(n=200, seed=4)
        params = GriddingParams(cell_size=1.0)
        extent = (0.0, 0.0, 10.0, 10.0)
        base = grid_oracle(cloud, params, extent, weight_scale=1.0)
        doubled = grid_oracle(cloud, params, extent, weight_scale=2.0)
        np.testing.assert_allclose(base, doubled, atol=1e-12)
        dem = grid_dem(cloud, params, extent)
        np.testing.assert_allclose(dem.values, base, atol=1e-9)

    def test_empty_cloud_raises(self):
        with pytest.raises(DomainError):
            grid_dem(PointCloud(np.zeros((0, 3))), GriddingParams(1.0), (0, 0, 1, 1))


class TestCloudFromDisparity:
    def test_flat_scene_heights_within_expected_precision(self):
        import math

        from stereoforge import synth
        from stereoforge.pairsel import convergence_from_bh

        spec = synth.SceneSpec(extent=(60.0, 60.0), base_elevation=2.0,
                               noise_amplitude=0.0, albedo_texture_seed=4)
        fx = synth.make_stereo_fixture(spec, bh_target=0.5, gsd=0.3,
                                       altitude=100e3, n_lines=96, n_samples=96)
        disp = match_dense(fx.img1, fx.img2)
        cloud = cloud_from_disparity(disp, fx.cam1, fx.cam2)
        assert len(cloud) > 1000
        ep = 1.0 * 0.3 / math.tan(math.radians(convergence_from_bh(0.5)))
        assert np.max(np.abs(cloud.points[:, 2] - 2.0)) <= ep

    def test_fixture_cloud_lands_on_truth_surface(self, small_fixture):
        disp = match_dense(small_fixture.img1, small_fixture.img2)
        cloud = cloud_from_disparity(disp, small_fixture.cam1, small_fixture.cam2)
        assert len(cloud) > 2000
        z_true, ok = small_fixture.truth.sample_bilinear(
            cloud.points[:, 0], cloud.points[:, 1]
        )
        errs = np.abs(cloud.points[ok, 2] - z_true[ok])
        assert np.median(errs) < 0.3  # within one GSD of the truth surface

    def test_mean_miss_distance_below_half_gsd(self, small_fixture):
        disp = match_dense(small_fixture.img1, small_fixture.img2)
        cloud = cloud_from_disparity(disp, small_fixture.cam1, small_fixture.cam2)
        assert cloud.errors is not None
        assert cloud.errors.mean() < 0.5 * 0.3

    def test_empty_disparity_gives_empty_cloud(self, small_fixture):
        from stereoforge.densematch import DisparityMap

        disp = DisparityMap(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4), bool))
        cloud = cloud_from_disparity(disp, small_fixture.cam1, small_fixture.cam2)
        assert len(cloud) == 0

    def test_extent_snaps_to_cells(self):
        cloud = PointCloud(np.array([[0.1, 0.2, 1.0], [9.7, 4.4, 2.0]]))
        x0, y0, x1, y1 = extent_of(cloud, 1.0)
        assert (x1 - x0) % 1.0 == pytest.approx(0.0, abs=1e-12)
        assert x0 <= 0.1 and x1 >= 9.7 and y0 <= 0.2 and y1 >= 4.4
