"""Camera model and rigid-transform tests.

Oracles: per-component np.interp for ephemeris interpolation, similar
triangles for nadir projection offsets, closed-form detector angles for
back-projection.
"""

import math

import numpy as np
import pytest

from conftest import NADIR, make_nadir_camera
from stereoforge.errors import BoundsError, DomainError, ProjectionError
from stereoforge.geom import (
    ImagePoint,
    Intrinsics,
    PushbroomCamera,
    RigidTransform,
    back_project,
    back_project_many,
    project,
    project_many,
    rotation_from_axis_angle,
    state_at_line,
    unit,
)


def quadratic_ephemeris_camera():
    """Three-sample ephemeris whose positions lie on a parabola in time."""
    times = np.array([0.0, 1.0, 2.0])
    positions = np.array([[t, 2 * t, 1000.0 + t * t] for t in times])
    orientations = np.broadcast_to(NADIR, (3, 3, 3)).copy()
    return PushbroomCamera(
        intrinsics=Intrinsics(0.5, 0.0005, 31.5, 64),
        times=times,
        positions=positions,
        orientations=orientations,
        line_exposure=0.025,
        n_lines=64,
        start_time=0.0,
    )


class TestStateAtLine:
    def test_state_at_ephemeris_sample_is_verbatim(self):
        cam = quadratic_ephemeris_camera()
        line = 1.0 / cam.line_exposure  # t = 1.0 exactly
        pos, rot = state_at_line(cam, line)
        np.testing.assert_allclose(pos, cam.positions[1], atol=1e-12)
        np.testing.assert_allclose(rot, cam.orientations[1], atol=1e-12)

    def test_two_sample_midpoint_averages_positions(self):
        times = np.array([0.0, 1.0])
        positions = np.array([[0.0, 0.0, 1000.0], [10.0, 4.0, 1010.0]])
        orientations = np.broadcast_to(NADIR, (2, 3, 3)).copy()
        cam = PushbroomCamera(
            intrinsics=Intrinsics(0.5, 0.0005, 31.5, 64),
            times=times, positions=positions, orientations=orientations,
            line_exposure=1.0 / 64, n_lines=64, start_time=0.0,
        )
        pos, _ = state_at_line(cam, 32.0)  # t = 0.5
        np.testing.assert_allclose(pos, positions.mean(axis=0), atol=1e-12)

    def test_off_sample_query_matches_piecewise_linear_oracle(self):
        cam = quadratic_ephemeris_camera()
        for line in (7.3, 20.0, 41.1, 63.9):
            t = cam.start_time + line * cam.line_exposure
            expected = np.array(
                [np.interp(t, cam.times, cam.positions[:, k]) for k in range(3)]
            )
            pos, _ = state_at_line(cam, line)
            np.testing.assert_allclose(pos, expected, atol=1e-12)

    def test_out_of_range_line_raises(self):
        cam = quadratic_ephemeris_camera()
        with pytest.raises(BoundsError):
            state_at_line(cam, -0.5)
        with pytest.raises(BoundsError):
            state_at_line(cam, cam.n_lines + 1.0)

    def test_state_is_continuous(self):
        cam = quadratic_ephemeris_camera()
        eps = 1e-6
        for line in (0.5, 31.9, 32.0 + eps, 50.0):
            p0, r0 = state_at_line(cam, line)
            p1, r1 = state_at_line(cam, line + eps)
            assert np.linalg.norm(p1 - p0) < 1e-3
            assert np.max(np.abs(r1 - r0)) < 1e-3


class TestProject:
    def test_point_below_mid_swath_hits_principal_sample_mid_line(self):
        cam = make_nadir_camera(altitude=1000.0, n_lines=64, n_samples=64)
        mid_line = (cam.n_lines - 1) / 2.0
        pos, _ = state_at_line(cam, mid_line)
        ground = np.array([pos[0], pos[1], 0.0])
        ip = project(cam, ground)
        assert ip.sample == pytest.approx(cam.intrinsics.principal_sample, abs=1e-6)
        assert ip.line == pytest.approx(mid_line, abs=1e-6)

    def test_cross_track_offset_matches_similar_triangles(self):
        cam = make_nadir_camera(altitude=1000.0)
        intr = cam.intrinsics
        mid_line = (cam.n_lines - 1) / 2.0
        pos, rot = state_at_line(cam, mid_line)
        # offset along the camera's +x (increasing sample) axis
        x_axis = rot[:, 0]
        for d in (3.0, 11.0, -8.0):
            ground = np.array([pos[0], pos[1], 0.0]) + d * x_axis
            ip = project(cam, ground)
            expected = d * intr.focal_length / (1000.0 * intr.detector_pitch)
            assert ip.sample - intr.principal_sample == pytest.approx(expected, abs=1e-6)

    def test_point_never_seen_raises_projection_error(self):
        cam = make_nadir_camera()
        # far beyond the along-track coverage of the strip
        with pytest.raises(ProjectionError):
            project(cam, np.array([0.0, 1e7, 0.0]))

    def test_point_behind_camera_raises(self):
        cam = make_nadir_camera(altitude=1000.0)
        with pytest.raises(ProjectionError):
            project(cam, np.array([0.0, 0.0, 2000.0]))


class TestBackProject:
    def test_principal_sample_at_nadir_points_down(self):
        cam = make_nadir_camera()
        ray = back_project(cam, ImagePoint(cam.intrinsics.principal_sample, 10.0))
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, -1.0], atol=1e-12)

    def test_one_pixel_offset_rotates_by_detector_angle(self):
        cam = make_nadir_camera()
        intr = cam.intrinsics
        r0 = back_project(cam, ImagePoint(intr.principal_sample, 5.0))
        r1 = back_project(cam, ImagePoint(intr.principal_sample + 1.0, 5.0))
        angle = math.acos(np.clip(np.dot(r0.direction, r1.direction), -1, 1))
        assert angle == pytest.approx(math.atan(intr.detector_pitch / intr.focal_length), abs=1e-12)

    def test_out_of_bounds_raises(self):
        cam = make_nadir_camera()
        with pytest.raises(BoundsError):
            back_project(cam, ImagePoint(-1.0, 5.0))
        with pytest.raises(BoundsError):
            back_project(cam, ImagePoint(5.0, cam.n_lines + 2.0))

    def test_project_back_project_round_trip(self):
        cam = make_nadir_camera(altitude=1000.0)
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = ImagePoint(rng.uniform(2, 61), rng.uniform(2, 61))
            ray = back_project(cam, p)
            t = (0.0 - ray.origin[2]) / ray.direction[2]
            ground = ray.origin + t * ray.direction
            ip = project(cam, ground)
            assert abs(ip.sample - p.sample) < 1e-3
            assert abs(ip.line - p.line) < 1e-3

    def test_back_project_many_matches_scalar(self):
        cam = make_nadir_camera()
        samples = np.array([3.0, 17.5, 40.0])
        lines = np.array([2.0, 9.25, 55.0])
        origins, dirs = back_project_many(cam, samples, lines)
        for k in range(3):
            ray = back_project(cam, ImagePoint(samples[k], lines[k]))
            np.testing.assert_allclose(origins[k], ray.origin, atol=1e-12)
            np.testing.assert_allclose(dirs[k], ray.direction, atol=1e-12)


class TestRigidTransform:
    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(DomainError):
            RigidTransform(np.eye(3) * 1.1, np.zeros(3))

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            rot = rotation_from_axis_angle(rng.normal(size=3))
            t = RigidTransform(rot, rng.normal(size=3) * 10)
            ident = t.compose(t.inverse())
            assert np.max(np.abs(ident.rotation - np.eye(3))) < 1e-9
            assert np.max(np.abs(ident.translation)) < 1e-9

    def test_preserves_pairwise_distances(self):
        rng = np.random.default_rng(3)
        t = RigidTransform(rotation_from_axis_angle([0.3, -0.2, 0.9]), [4.0, -2.0, 7.0])
        a = rng.normal(size=(50, 3)) * 100
        b = rng.normal(size=(50, 3)) * 100
        d_before = np.linalg.norm(a - b, axis=1)
        d_after = np.linalg.norm(t.apply(a) - t.apply(b), axis=1)
        np.testing.assert_allclose(d_after, d_before, atol=1e-9)


class TestValidation:
    def test_intrinsics_validation(self):
        with pytest.raises(DomainError):
            Intrinsics(-1.0, 0.001, 10.0, 64)
        with pytest.raises(DomainError):
            Intrinsics(1.0, 0.001, 64.0, 64)

    def test_ephemeris_must_be_increasing(self):
        with pytest.raises(DomainError):
            PushbroomCamera(
                intrinsics=Intrinsics(0.5, 0.0005, 31.5, 64),
                times=np.array([1.0, 0.0]),
                positions=np.zeros((2, 3)),
                orientations=np.broadcast_to(np.eye(3), (2, 3, 3)).copy(),
                line_exposure=0.01,
                n_lines=64,
                start_time=0.0,
            )

    def test_unit_rejects_zero_vector(self):
        with pytest.raises(DomainError):
            unit(np.zeros(3))

    def test_project_many_flags_unseen_points(self):
        cam = make_nadir_camera()
        pts = np.array([[0.0, 0.0, 0.0], [0.0, 1e7, 0.0]])
        samples, lines, status = project_many(cam, pts)
        assert status[0] == 0 and status[1] != 0
        assert np.isnan(samples[1]) and np.isnan(lines[1])
