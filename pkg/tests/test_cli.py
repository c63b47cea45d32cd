"""CLI surface: subcommands, file flows, exit codes."""

import numpy as np
import pytest

from stereoforge.cli import main
from stereoforge.ingest import read_dem, read_image

SCENE = """\
extent_x_m = 80
extent_y_m = 80
base_elevation_m = 0
noise_amplitude_m = 0.25
albedo_seed = 7
sun_incidence_deg = 35
sun_azimuth_deg = 90
crater = 0 6 12 3
crater = -14 -12 7 2
"""


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_synth")
    (d / "scene.txt").write_text(SCENE)
    rc = main([
        "synth", "--spec", str(d / "scene.txt"), "--bh", "0.5", "--gsd", "0.3",
        "--altitude", "100000", "--n-lines", "96", "--n-samples", "96",
        "--out-dir", str(d / "fix"),
    ])
    assert rc == 0
    return d / "fix"


class TestSynthCommand:
    def test_outputs_exist(self, synth_dir):
        for name in ("left.pgm", "right.pgm", "left.meta", "right.meta", "truth.dem"):
            assert (synth_dir / name).exists()

    def test_images_readable_and_textured(self, synth_dir):
        img = read_image(synth_dir / "left.pgm")
        assert img.values.std() > 100.0


class TestPairsCommand:
    def test_ranked_csv(self, synth_dir, tmp_path):
        meta_dir = tmp_path / "metas"
        meta_dir.mkdir()
        for name in ("left.meta", "right.meta"):
            (meta_dir / name).write_text((synth_dir / name).read_text())
        out = tmp_path / "pairs.csv"
        rc = main(["pairs", "--meta-dir", str(meta_dir), "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("id1,id2,")
        assert len(lines) == 2
        fields = lines[1].split(",")
        assert float(fields[3]) == pytest.approx(0.5, abs=1e-6)

    def test_one_sidecar_is_insufficient(self, synth_dir, tmp_path):
        meta_dir = tmp_path / "one"
        meta_dir.mkdir()
        (meta_dir / "left.meta").write_text((synth_dir / "left.meta").read_text())
        rc = main(["pairs", "--meta-dir", str(meta_dir), "--out", str(tmp_path / "p.csv")])
        assert rc == 4


class TestStageCommands:
    def test_adjust_match_triangulate_grid_flow(self, synth_dir, tmp_path):
        adj = tmp_path / "cams.adjust"
        rc = main([
            "adjust", "--left", str(synth_dir / "left.pgm"),
            "--right", str(synth_dir / "right.pgm"),
            "--meta1", str(synth_dir / "left.meta"),
            "--meta2", str(synth_dir / "right.meta"),
            "--max-points", "32", "--out", str(adj),
        ])
        assert rc == 0
        assert adj.exists() and (tmp_path / "cams.adjust.ties").exists()

        disp = tmp_path / "out.disp"
        rc = main([
            "match", "--left", str(synth_dir / "left.pgm"),
            "--right", str(synth_dir / "right.pgm"),
            "--adjust", str(adj), "--ties", str(tmp_path / "cams.adjust.ties"),
            "--out", str(disp),
        ])
        assert rc == 0

        cloud = tmp_path / "out.xyz"
        rc = main([
            "triangulate", "--disparity", str(disp),
            "--meta1", str(synth_dir / "left.meta"),
            "--meta2", str(synth_dir / "right.meta"),
            "--adjust", str(adj), "--out", str(cloud),
        ])
        assert rc == 0

        dem = tmp_path / "out.dem"
        rc = main(["grid", "--cloud", str(cloud), "--cell-size", "0.3",
                   "--out", str(dem)])
        assert rc == 0
        got = read_dem(dem)
        assert got.valid.mean() > 0.5

    def test_icp_debias_mosaic_validate_flow(self, synth_dir, tmp_path):
        truth = read_dem(synth_dir / "truth.dem")
        # a cloud sampled from the truth, shifted upward
        rows = np.arange(4, truth.n_rows - 4, 2)
        cols = np.arange(4, truth.n_cols - 4, 2)
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        pts = np.column_stack([
            truth.cell_center_x(cc.ravel()),
            truth.cell_center_y(rr.ravel()),
            truth.values[rr.ravel(), cc.ravel()] + 5.0,
        ])
        from stereoforge.ingest import PointCloud, write_cloud

        cloud_path = tmp_path / "c.xyz"
        write_cloud(PointCloud(pts), cloud_path)
        rc = main([
            "icp", "--cloud", str(cloud_path), "--ref", str(synth_dir / "truth.dem"),
            "--out-transform", str(tmp_path / "t.transform"),
            "--out-cloud", str(tmp_path / "aligned.xyz"),
        ])
        assert rc == 0

        rc = main(["grid", "--cloud", str(tmp_path / "aligned.xyz"),
                   "--cell-size", "0.5", "--out", str(tmp_path / "d.dem")])
        assert rc == 0
        rc = main(["debias", "--dem", str(tmp_path / "d.dem"),
                   "--ref", str(synth_dir / "truth.dem"),
                   "--out", str(tmp_path / "d2.dem")])
        assert rc == 0
        rc = main(["mosaic", "--primary", str(tmp_path / "d2.dem"),
                   "--ref", str(synth_dir / "truth.dem"), "--blend-len", "14",
                   "--out", str(tmp_path / "final.dem")])
        assert rc == 0

        profiles = tmp_path / "profiles.txt"
        profiles.write_text("-20 0 20 0\n-15 -15 15 15\n")
        rc = main(["validate", "--dem", str(tmp_path / "final.dem"),
                   "--ref", str(synth_dir / "truth.dem"),
                   "--profiles", str(profiles),
                   "--report", str(tmp_path / "report.txt")])
        assert rc == 0
        report = (tmp_path / "report.txt").read_text()
        assert "pooled" in report


class TestRunCommand:
    def test_run_and_exit_codes(self, fixture_dir, tmp_path):
        rc = main(["run", "--config", str(fixture_dir / "config.ini"),
                   "--out-dir", str(tmp_path / "cli_run")])
        assert rc == 0
        assert (tmp_path / "cli_run" / "manifest.json").exists()

    def test_missing_config_exits_2(self, tmp_path):
        rc = main(["run", "--config", str(tmp_path / "missing.ini")])
        assert rc == 2

    def test_threshold_abort_exits_3(self, fixture_dir, tmp_path):
        cfg_text = (fixture_dir / "config.ini").read_text()
        bad = tmp_path / "strict.ini"
        bad.write_text(cfg_text + "\n[pairsel]\nbh_max = 0.4\n")
        rc = main(["run", "--config", str(bad),
                   "--out-dir", str(tmp_path / "aborted")])
        assert rc == 3

    def test_refine_without_run_exits_3(self, fixture_dir, tmp_path):
        rc = main(["refine", "--config", str(fixture_dir / "config.ini"),
                   "--out-dir", str(tmp_path / "nothing")])
        assert rc == 3
