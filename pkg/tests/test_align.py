"""ICP recovery and bias-correction semantics."""

import math

import numpy as np
import pytest

from conftest import small_scene
from stereoforge import synth
from stereoforge.align import (
    BiasCorrection,
    apply_bias,
    estimate_bias,
    icp_align,
    read_transform,
    transform_cloud,
    write_transform,
)
from stereoforge.errors import GeometryError, InsufficientDataError
from stereoforge.geom import RigidTransform, rotation_from_axis_angle
from stereoforge.ingest import DemGrid, PointCloud


def reference_terrain(cell=0.5):
    return synth.make_terrain(small_scene(seed=12), cell)


def cloud_from_dem(dem, stride=2, border=4):
    rows = np.arange(border, dem.n_rows - border, stride)
    cols = np.arange(border, dem.n_cols - border, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    pts = np.column_stack([
        dem.cell_center_x(cc),
        dem.cell_center_y(rr),
        dem.values[rr, cc],
    ])
    return PointCloud(pts)


class TestIcpAlign:
    def test_already_aligned_cloud_gives_identity(self):
        ref = reference_terrain()
        cloud = cloud_from_dem(ref)
        res = icp_align(cloud, ref)
        assert res.transform.rotation_angle_deg() < math.degrees(1e-6)
        assert np.linalg.norm(res.transform.translation) < 1e-6
        assert res.final_rms < 1e-9

    def test_recovers_known_rigid_displacement(self):
        ref = reference_terrain()
        cloud = cloud_from_dem(ref)
        disp = RigidTransform(
            rotation_from_axis_angle(np.array([1.0, 0.0, 0.0]) * math.radians(1.0)),
            np.array([10.0, -5.0, 20.0]),
        )
        moved = transform_cloud(cloud, disp)
        res = icp_align(moved, ref, max_iter=80)
        # recovered transform composed with the displacement ~ identity
        total = res.transform.compose(disp)
        assert total.rotation_angle_deg() < 0.02
        assert np.linalg.norm(total.translation) < 0.1

    def test_rms_trace_is_non_increasing(self):
        ref = reference_terrain()
        cloud = cloud_from_dem(ref)
        disp = RigidTransform(
            rotation_from_axis_angle([0.0, math.radians(0.5), 0.0]),
            np.array([3.0, 2.0, -6.0]),
        )
        res = icp_align(transform_cloud(cloud, disp), ref)
        assert all(b <= a + 1e-12 for a, b in zip(res.rms_trace, res.rms_trace[1:]))

    def test_rotation_stays_orthonormal(self):
        ref = reference_terrain()
        cloud = cloud_from_dem(ref)
        disp = RigidTransform(
            rotation_from_axis_angle([math.radians(0.8), 0.0, 0.0]),
            np.array([5.0, 1.0, 10.0]),
        )
        res = icp_align(transform_cloud(cloud, disp), ref, max_iter=60)
        r = res.transform.rotation
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9

    def test_all_nodata_reference_is_degenerate(self):
        vals = np.full((8, 8), -32768.0)
        ref = DemGrid(0.0, 0.0, 1.0, vals)
        cloud = PointCloud(np.random.default_rng(0).uniform(0, 8, (200, 3)))
        with pytest.raises(GeometryError):
            icp_align(cloud, ref)

    def test_cloud_off_the_valid_region_is_insufficient(self):
        ref = reference_terrain()
        far = PointCloud(
            np.column_stack([
                np.random.default_rng(1).uniform(500, 600, 200),
                np.random.default_rng(2).uniform(500, 600, 200),
                np.zeros(200),
            ])
        )
        with pytest.raises(InsufficientDataError):
            icp_align(far, ref)


class TestBias:
    def test_constant_offset_recovered(self):
        ref = reference_terrain()
        dem = DemGrid(ref.origin_x, ref.origin_y, ref.cell_size, ref.values + 3.0)
        corr = estimate_bias(dem, ref)
        assert corr.delta_z == pytest.approx(3.0, abs=1e-9)

    def test_identical_grids_give_zero(self):
        ref = reference_terrain()
        corr = estimate_bias(ref.copy(), ref)
        assert corr.delta_z == pytest.approx(0.0, abs=1e-12)

    def test_noisy_offset_statistics(self):
        rng = np.random.default_rng(7)
        vals = rng.normal(0.0, 2.0, size=(120, 120))
        ref = DemGrid(0.0, 0.0, 1.0, vals)
        dem = DemGrid(0.0, 0.0, 1.0, vals + rng.normal(5.0, 1.0, size=vals.shape))
        corr = estimate_bias(dem, ref)
        assert corr.n_samples > 10_000
        assert corr.delta_z == pytest.approx(5.0, abs=0.05)

    def test_apply_bias_examples(self):
        dem = DemGrid(0.0, 0.0, 1.0, np.array([[10.0, -32768.0], [4.0, 6.0]]))
        out = apply_bias(dem, BiasCorrection(3.0, 10))
        assert out.values[0, 0] == 7.0
        assert out.values[0, 1] == -32768.0  # nodata untouched
        ident = apply_bias(dem, BiasCorrection(0.0, 1))
        assert np.array_equal(ident.values, dem.values)

    def test_estimate_apply_estimate_is_idempotent(self):
        ref = reference_terrain()
        dem = DemGrid(ref.origin_x, ref.origin_y, ref.cell_size, ref.values + 2.75)
        corr = estimate_bias(dem, ref)
        fixed = apply_bias(dem, corr)
        again = estimate_bias(fixed, ref)
        assert again.delta_z == pytest.approx(0.0, abs=1e-9)

    def test_relief_is_preserved(self):
        ref = reference_terrain()
        dem = DemGrid(ref.origin_x, ref.origin_y, ref.cell_size, ref.values + 4.0)
        out = apply_bias(dem, estimate_bias(dem, ref))
        diff_before = dem.values[0, 0] - dem.values[5, 5]
        diff_after = out.values[0, 0] - out.values[5, 5]
        assert diff_after == pytest.approx(diff_before, abs=1e-12)

    def test_transect_sampling(self):
        from stereoforge.validate import extract_profile

        ref = reference_terrain()
        dem = DemGrid(ref.origin_x, ref.origin_y, ref.cell_size, ref.values + 1.5)
        a = (ref.origin_x + 5.0, 0.0)
        b = (ref.x_max - 5.0, 0.0)
        profile = extract_profile(dem, a, b, step=1.0)
        corr = estimate_bias(dem, ref, transects=[profile])
        assert corr.delta_z == pytest.approx(1.5, abs=1e-9)

    def test_no_overlap_raises(self):
        ref = reference_terrain()
        dem = DemGrid(ref.origin_x + 10_000.0, ref.origin_y, ref.cell_size,
                      ref.values.copy())
        with pytest.raises(InsufficientDataError):
            estimate_bias(dem, ref)


class TestTransformIO:
    def test_round_trip(self, tmp_path):
        t = RigidTransform(
            rotation_from_axis_angle([0.01, -0.02, 0.03]),
            np.array([1.5, -2.25, 30.0]),
        )
        path = tmp_path / "t.transform"
        write_transform(t, path)
        back = read_transform(path)
        assert np.array_equal(back.rotation, t.rotation)
        assert np.array_equal(back.translation, t.translation)
