"""Shared camera and scene builders for the test suite."""

import numpy as np
import pytest

from stereoforge import synth
from stereoforge.geom import Intrinsics, PushbroomCamera, look_at_orientation

NADIR = look_at_orientation(np.array([0.0, 0.0, -1.0]), np.array([0.0, 1.0, 0.0]))


def make_nadir_camera(
    altitude=1000.0,
    n_lines=64,
    n_samples=64,
    gsd=1.0,
    focal_length=0.5,
    n_eph=3,
    start_time=0.0,
    speed=100.0,
):
    """Straight-line nadir pushbroom flying along +y over the origin."""
    pitch = focal_length * gsd / altitude
    intr = Intrinsics(
        focal_length=focal_length,
        detector_pitch=pitch,
        principal_sample=(n_samples - 1) / 2.0,
        n_samples=n_samples,
    )
    line_exposure = gsd / speed
    strip = n_lines * gsd
    y0 = -0.5 * strip + 0.5 * gsd
    pad = 2.0 * line_exposure
    times = np.linspace(start_time - pad, start_time + n_lines * line_exposure + pad, n_eph)
    ys = y0 + (times - start_time) / line_exposure * gsd
    positions = np.column_stack(
        [np.zeros_like(ys), ys, np.full_like(ys, altitude)]
    )
    orientations = np.broadcast_to(NADIR, (n_eph, 3, 3)).copy()
    return PushbroomCamera(
        intrinsics=intr,
        times=times,
        positions=positions,
        orientations=orientations,
        line_exposure=line_exposure,
        n_lines=n_lines,
        start_time=start_time,
    )


def small_scene(seed=7):
    return synth.SceneSpec(
        extent=(80.0, 80.0),
        base_elevation=0.0,
        craters=((0.0, 6.0, 12.0, 3.0), (-14.0, -12.0, 7.0, 2.0)),
        noise_amplitude=0.25,
        albedo_texture_seed=seed,
        sun_incidence=35.0,
        sun_azimuth=90.0,
    )


@pytest.fixture(scope="session")
def small_fixture():
    """128 px stereo pair at B/H 0.5 used by several modules."""
    return synth.make_stereo_fixture(
        small_scene(), bh_target=0.5, gsd=0.3, altitude=100e3,
        n_lines=128, n_samples=128,
    )


CONFIG_TEMPLATE = """\
[inputs]
meta1 = {d}/left.meta
meta2 = {d}/right.meta
left_image = {d}/left.pgm
right_image = {d}/right.pgm
ref_dem = {d}/truth.dem

[camera]
prior_elevation_m = 0.0

[adjust]
max_tie_points = 48

[grid]
cell_size_m = 0.3
"""


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory, small_fixture):
    """The small fixture written to disk plus a matching pipeline config."""
    from stereoforge.ingest import write_dem, write_image, write_meta

    d = tmp_path_factory.mktemp("fixdata")
    write_image(small_fixture.img1, d / "left.pgm")
    write_image(small_fixture.img2, d / "right.pgm")
    write_meta(small_fixture.meta1, d / "left.meta")
    write_meta(small_fixture.meta2, d / "right.meta")
    write_dem(small_fixture.truth, d / "truth.dem")
    (d / "config.ini").write_text(CONFIG_TEMPLATE.format(d=d))
    return d


@pytest.fixture(scope="session")
def pipeline_run(fixture_dir, tmp_path_factory):
    """One complete pipeline execution over the small fixture."""
    from stereoforge.pipeline import load_config, run_pipeline

    out = tmp_path_factory.mktemp("run_main")
    cfg = load_config(fixture_dir / "config.ini", overrides={"out_dir": str(out)})
    manifest = run_pipeline(cfg)
    return out, cfg, manifest
