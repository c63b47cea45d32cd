"""Synthetic scene generation and rendering.

The renderer is the oracle machine for the end-to-end tests, so these
tests pin its determinism, its agreement with the camera model, and the
numba / numpy kernel parity.
"""

import math

import numpy as np
import pytest

from conftest import make_nadir_camera, small_scene
from stereoforge import synth
from stereoforge.errors import ExtentError
from stereoforge.geom import ImagePoint, back_project, project, state_at_line
from stereoforge.ingest import DemGrid


class TestMakeTerrain:
    def test_flat_scene_is_constant(self):
        spec = synth.SceneSpec(extent=(20.0, 20.0), base_elevation=5.0,
                               noise_amplitude=0.0)
        dem = synth.make_terrain(spec, 1.0)
        np.testing.assert_array_equal(dem.values, np.full((20, 20), 5.0))

    def test_single_crater_center_and_rim(self):
        # crater centred exactly on a cell centre
        spec = synth.SceneSpec(extent=(40.0, 40.0), base_elevation=0.0,
                               craters=((0.5, 0.5, 6.0, 2.0),),
                               noise_amplitude=0.0)
        dem = synth.make_terrain(spec, 1.0)
        row, col = dem.frac_index(0.5, 0.5)
        center = dem.values[int(round(row[()])), int(round(col[()]))]
        assert center == pytest.approx(-2.0)
        # cells near one crater radius from the centre sit above base level
        rim_row, rim_col = dem.frac_index(0.5 + 6.0, 0.5)
        rim = dem.values[int(round(rim_row[()])), int(round(rim_col[()]))]
        assert rim > 0.0

    def test_same_seed_is_bit_identical(self):
        spec = small_scene(seed=3)
        a = synth.make_terrain(spec, 0.5)
        b = synth.make_terrain(spec, 0.5)
        assert np.array_equal(a.values, b.values)

    def test_different_seeds_differ(self):
        a = synth.make_terrain(small_scene(seed=3), 0.5)
        b = synth.make_terrain(small_scene(seed=4), 0.5)
        assert not np.array_equal(a.values, b.values)


class TestRender:
    def test_flat_terrain_nadir_render_is_albedo_times_shading(self):
        spec = synth.SceneSpec(extent=(120.0, 120.0), base_elevation=0.0,
                               noise_amplitude=0.0, albedo_texture_seed=5,
                               sun_incidence=30.0)
        truth = synth.make_terrain(spec, 0.5)
        cam = make_nadir_camera(altitude=1000.0, n_lines=32, n_samples=32, gsd=1.0)
        img = synth.render_pushbroom(truth, cam, spec)

        albedo = synth.albedo_texture(truth, spec)
        shade = math.cos(math.radians(30.0))
        # reconstruct each pixel's ground point from the camera geometry
        for line in (3, 17, 30):
            pos, rot = state_at_line(cam, float(line))
            for sample in (2, 16, 29):
                ray = back_project(cam, ImagePoint(float(sample), float(line)))
                t = (0.0 - ray.origin[2]) / ray.direction[2]
                g = ray.origin + t * ray.direction
                tex, ok = DemGrid(truth.origin_x, truth.origin_y, truth.cell_size,
                                  albedo).sample_bilinear(g[0], g[1])
                assert ok[0]
                expected = tex[0] * shade * synth.RADIANCE_SCALE
                assert img.values[line, sample] == pytest.approx(expected, rel=1e-6)

    def test_two_renders_bit_identical(self, small_fixture):
        spec = small_scene()
        again = synth.render_pushbroom(small_fixture.truth, small_fixture.cam1, spec)
        assert np.array_equal(again.values, small_fixture.img1.values)

    def test_intersections_reproject_to_originating_pixel(self, small_fixture):
        cam = small_fixture.cam1
        truth = small_fixture.truth
        rng = np.random.default_rng(8)
        for _ in range(12):
            px = ImagePoint(rng.uniform(10, 117), rng.uniform(10, 117))
            ray = back_project(cam, px)
            # independent fine-stepped intersection of the ray with the surface
            t = (truth.values.max() + 1.0 - ray.origin[2]) / ray.direction[2]
            t_hit = None
            step = 0.05
            prev_f = None
            while t < (truth.values.min() - 1.0 - ray.origin[2]) / ray.direction[2]:
                p = ray.origin + t * ray.direction
                z, ok = truth.sample_bilinear(p[0], p[1])
                if ok[0]:
                    f = p[2] - z[0]
                    if prev_f is not None and prev_f > 0 >= f:
                        lo, hi = t - step, t
                        for _ in range(60):
                            mid = 0.5 * (lo + hi)
                            pm = ray.origin + mid * ray.direction
                            zm, okm = truth.sample_bilinear(pm[0], pm[1])
                            if okm[0] and pm[2] - zm[0] > 0:
                                lo = mid
                            else:
                                hi = mid
                        t_hit = 0.5 * (lo + hi)
                        break
                    prev_f = f
                else:
                    prev_f = None
                t += step
            assert t_hit is not None
            ground = ray.origin + t_hit * ray.direction
            ip = project(cam, ground)
            assert abs(ip.sample - px.sample) < 0.01
            assert abs(ip.line - px.line) < 0.01

    def test_backend_parity_is_bit_exact(self, small_fixture, monkeypatch):
        spec = small_scene()
        monkeypatch.setenv("STEREOFORGE_NUMBA", "0")
        numpy_img = synth.render_pushbroom(small_fixture.truth, small_fixture.cam1, spec)
        assert np.array_equal(numpy_img.values, small_fixture.img1.values)


class TestStereoFixture:
    def test_baseline_is_bh_times_altitude(self, small_fixture):
        m1, m2 = small_fixture.meta1, small_fixture.meta2
        p1 = m1.position_at(m1.mid_time())
        p2 = m2.position_at(m2.mid_time())
        assert np.linalg.norm(p1 - p2) == pytest.approx(0.5 * 100e3, rel=1e-12)

    def test_bh_zero_gives_coincident_cameras(self):
        spec = small_scene()
        fx = synth.make_stereo_fixture(spec, bh_target=0.0, gsd=0.3,
                                       altitude=100e3, n_lines=32, n_samples=32)
        p1 = fx.meta1.position_at(fx.meta1.mid_time())
        p2 = fx.meta2.position_at(fx.meta2.mid_time())
        np.testing.assert_allclose(p1, p2, atol=1e-9)

    def test_footprint_outside_terrain_raises(self):
        spec = synth.SceneSpec(extent=(10.0, 10.0), noise_amplitude=0.0)
        with pytest.raises(ExtentError):
            synth.make_stereo_fixture(spec, bh_target=0.5, gsd=0.3,
                                      altitude=100e3, n_lines=64, n_samples=64)

    def test_fixture_is_reproducible(self, small_fixture):
        fx2 = synth.make_stereo_fixture(small_scene(), bh_target=0.5, gsd=0.3,
                                        altitude=100e3, n_lines=128, n_samples=128)
        assert np.array_equal(fx2.img1.values, small_fixture.img1.values)
        assert np.array_equal(fx2.img2.values, small_fixture.img2.values)
        assert np.array_equal(fx2.truth.values, small_fixture.truth.values)

    def test_images_observe_the_same_relief(self, small_fixture):
        # both images should be well exposed and textured
        for img in (small_fixture.img1, small_fixture.img2):
            assert img.values.std() > 500.0
            assert img.values.min() >= 0.0


class TestSceneSpecFile:
    def test_parse_scene_spec(self, tmp_path):
        path = tmp_path / "scene.txt"
        path.write_text(
            "# scene\n"
            "extent_x_m = 50\n"
            "extent_y_m = 60\n"
            "base_elevation_m = 2.0\n"
            "noise_amplitude_m = 0.1\n"
            "albedo_seed = 9\n"
            "sun_incidence_deg = 20\n"
            "sun_azimuth_deg = 45\n"
            "crater = 0 0 5 1.5\n"
            "crater = 3 -4 2 0.5\n"
        )
        spec = synth.parse_scene_spec(path)
        assert spec.extent == (50.0, 60.0)
        assert len(spec.craters) == 2
        assert spec.craters[1] == (3.0, -4.0, 2.0, 0.5)
