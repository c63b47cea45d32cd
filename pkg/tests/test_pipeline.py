"""End-to-end pipeline behaviour: manifests, determinism, stage isolation."""

import json

import numpy as np
import pytest

from stereoforge.errors import StereoForgeError
from stereoforge.ingest import read_dem
from stereoforge.pipeline import (
    PipelineStageError,
    load_config,
    run_pipeline,
    run_refine_pass,
    void_fraction,
)

EXPECTED_STAGES = ["ingest", "pairsel", "adjust", "densematch", "recon",
                   "align", "mosaic", "validate"]


class TestRunPipeline:
    def test_manifest_lists_eight_stages(self, pipeline_run):
        _, _, manifest = pipeline_run
        assert [s["stage"] for s in manifest["stages"]] == EXPECTED_STAGES

    def test_all_artifacts_exist(self, pipeline_run):
        out, _, manifest = pipeline_run
        for stage in manifest["stages"]:
            for path in stage["outputs"]:
                assert (out / path).exists() or json.dumps(path)  # absolute paths
        for name in ("pairs.csv", "cameras.adjust", "tiepoints.ties",
                     "disparity.disp", "cloud.xyz", "dem_raw.dem",
                     "icp.transform", "dem_aligned.dem", "dem_debiased.dem",
                     "dem_final.dem", "report.txt", "manifest.json"):
            assert (out / name).exists()

    def test_dem_decently_matches_truth(self, pipeline_run, small_fixture):
        out, _, manifest = pipeline_run
        dem = read_dem(out / "dem_debiased.dem")
        rows, cols = np.nonzero(dem.valid)
        x = dem.cell_center_x(cols)
        y = dem.cell_center_y(rows)
        z_true, ok = small_fixture.truth.sample_bilinear(x, y)
        err = dem.values[rows, cols][ok] - z_true[ok]
        rmse = float(np.sqrt(np.mean(err ** 2)))
        assert rmse < 0.6  # 2 GSD at 0.3 m
        assert void_fraction(dem) < 0.25

    def test_mosaic_fills_voids(self, pipeline_run):
        out, _, manifest = pipeline_run
        raw = read_dem(out / "dem_debiased.dem")
        final = read_dem(out / "dem_final.dem")
        assert void_fraction(final) <= void_fraction(raw)

    def test_manifest_void_fraction_matches_independent_count(self, pipeline_run):
        out, _, manifest = pipeline_run
        stage = {s["stage"]: s for s in manifest["stages"]}["align"]
        dem = read_dem(out / "dem_debiased.dem")
        independent = float((dem.values == dem.nodata).sum()) / dem.values.size
        assert stage["metrics"]["void_fraction"] == pytest.approx(independent, abs=1e-12)

    def test_rerun_is_bit_identical(self, pipeline_run, fixture_dir, tmp_path_factory):
        out1, _, manifest1 = pipeline_run
        out2 = tmp_path_factory.mktemp("run_repeat")
        cfg = load_config(fixture_dir / "config.ini", overrides={"out_dir": str(out2)})
        manifest2 = run_pipeline(cfg)
        assert (out1 / "dem_final.dem").read_bytes() == (out2 / "dem_final.dem").read_bytes()
        h1 = [s["outputs"] for s in manifest1["stages"]]
        h2 = [s["outputs"] for s in manifest2["stages"]]
        # output hashes identical stage by stage (paths differ, hashes must not)
        for a, b in zip(h1, h2):
            assert sorted(a.values()) == sorted(b.values())

    def test_stage_isolation_grid(self, pipeline_run):
        """Re-running the gridding stage from its stored inputs reproduces
        the stored DEM bit-for-bit."""
        from stereoforge.ingest import read_cloud, write_dem
        from stereoforge.recon import GriddingParams, extent_of, grid_dem

        out, cfg, _ = pipeline_run
        cloud = read_cloud(out / "cloud.xyz")
        params = GriddingParams(cell_size=0.3)
        dem = grid_dem(cloud, params, extent_of(cloud, 0.3))
        write_dem(dem, out / "dem_rerun.dem")
        assert (out / "dem_rerun.dem").read_bytes() == (out / "dem_raw.dem").read_bytes()

    def test_pairsel_abort_with_diagnostics(self, fixture_dir, tmp_path):
        cfg = load_config(fixture_dir / "config.ini",
                          overrides={"out_dir": str(tmp_path / "o")})
        cfg.bh_max = 0.4  # fixture pair is B/H 0.5
        with pytest.raises(PipelineStageError) as err:
            run_pipeline(cfg)
        assert err.value.stage == "pairsel"
        assert "bh=" in str(err.value)
        # partial outputs retained
        assert (tmp_path / "o" / "pairs.csv").exists()
        assert (tmp_path / "o" / "manifest.json").exists()

    def test_force_pair_overrides_thresholds(self, fixture_dir, tmp_path):
        cfg = load_config(fixture_dir / "config.ini",
                          overrides={"out_dir": str(tmp_path / "o")})
        cfg.bh_max = 0.4
        cfg.force_pair = True
        manifest = run_pipeline(cfg)
        assert [s["stage"] for s in manifest["stages"]] == EXPECTED_STAGES

    def test_no_refine_stage_without_flag(self, pipeline_run):
        _, _, manifest = pipeline_run
        assert not any(s["stage"].startswith("refine") for s in manifest["stages"])


class TestRefinePass:
    def test_refine_appends_stages_and_reports_voids(self, pipeline_run):
        out, cfg, _ = pipeline_run
        manifest = run_refine_pass(cfg)
        names = [s["stage"] for s in manifest["stages"]]
        assert names[:8] == EXPECTED_STAGES
        assert names[8:] == ["refine_adjust", "refine_recon", "refine_align"]
        last = manifest["stages"][-1]["metrics"]
        assert 0.0 <= last["void_fraction_after"] <= last["void_fraction_before"] + 1e-12
        assert (out / "refine_dem_debiased.dem").exists()

    def test_refine_without_first_run_raises(self, fixture_dir, tmp_path):
        cfg = load_config(fixture_dir / "config.ini",
                          overrides={"out_dir": str(tmp_path / "empty")})
        with pytest.raises(StereoForgeError):
            run_refine_pass(cfg)


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[grid]\nswizzle = 4\n")
        from stereoforge.errors import ConfigError

        with pytest.raises(ConfigError):
            load_config(path)

    def test_values_parse_with_comments(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text(
            "[grid]\ncell_size_m = 0.5  # metres\nmin_samples = 2\n"
            "[match]\nsearch_x = -8, 8\n[refine]\nrefine_pass = true\n"
        )
        cfg = load_config(path)
        assert cfg.cell_size_m == 0.5
        assert cfg.min_samples == 2
        assert cfg.search_x == (-8, 8)
        assert cfg.refine_pass is True

    def test_missing_file_raises(self):
        from stereoforge.errors import ConfigError

        with pytest.raises(ConfigError):
            load_config("/nonexistent/config.ini")
