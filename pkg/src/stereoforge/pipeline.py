"""Stage sequencing, configuration and run manifests.

A run executes ingest -> pairsel -> adjust -> densematch -> recon -> align
-> mosaic -> validate, writing every intermediate artifact plus a JSON
manifest (stage name, parameters, input/output hashes, wall time) from
which any stage can be re-run in isolation. The optional refine pass seeds
a second bundle adjustment from the ICP transform, re-matches, re-grids
with an expanded interpolation radius on the same lattice, and re-aligns.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import adjust as badjust
from . import align as midalign
from . import densematch, mosaic, pairsel, recon, validate
from .errors import ConfigError, InsufficientDataError, StereoForgeError
from .geom import back_project_many, transform_camera
from .ingest import (
    DemGrid,
    camera_from_meta,
    parse_meta,
    read_dem,
    read_image,
    write_cloud,
    write_dem,
)

STAGES = ("ingest", "pairsel", "adjust", "densematch", "recon",
          "align", "mosaic", "validate")


class PipelineStageError(StereoForgeError):
    """A stage failed; the original error is chained as __cause__."""

    def __init__(self, stage: str, original: Exception):
        super().__init__(f"stage '{stage}' failed: {original}")
        self.stage = stage
        self.original = original


@dataclass
class PipelineConfig:
    # inputs
    meta1: str = ""
    meta2: str = ""
    left_image: str = ""
    right_image: str = ""
    ref_dem: str = ""
    out_dir: str = "out"
    # camera fallback intrinsics (sidecar values win)
    focal_length_m: Optional[float] = None
    detector_pitch_m: Optional[float] = None
    principal_sample: Optional[float] = None
    prior_elevation_m: float = 0.0
    # pair screening
    bh_min: float = 0.3
    bh_max: float = 0.9
    max_d_incidence: float = 10.0
    max_d_azimuth: float = 20.0
    min_overlap: float = 0.3
    force_pair: bool = False
    # bundle adjustment
    max_tie_points: int = 64
    cauchy_c_px: float = 2.0
    ba_max_iterations: int = 100
    ground_constraint_weight: float = 1.0
    position_sigma_m: float = 50.0
    # dense matching
    window_radius: int = 7
    search_x: tuple[int, int] = (-16, 16)
    search_y: tuple[int, int] = (-3, 3)
    min_ncc: float = 0.5
    left_crop: Optional[tuple[int, int, int, int]] = None
    right_crop: Optional[tuple[int, int, int, int]] = None
    # gridding
    cell_size_m: Optional[float] = None       # default: mean GSD of the pair
    search_radius_m: Optional[float] = None   # default: 2 * cell
    idw_power: float = 2.0
    min_samples: int = 1
    max_miss_m: float = 5.0
    # icp
    icp_max_iterations: int = 50
    icp_tolerance_m: float = 1e-4
    # mosaic
    blend_len_px: float = 14.0
    # validation
    profile_step_m: Optional[float] = None    # default: 2 * cell
    features_file: str = ""
    at_ref_resolution: bool = False
    # refine pass
    refine_pass: bool = False
    expanded_search_radius_m: Optional[float] = None  # default: 2 * base radius
    refine_position_sigma_scale: float = 0.1


_SECTION_FIELDS = {
    "inputs": ("meta1", "meta2", "left_image", "right_image", "ref_dem", "out_dir"),
    "camera": ("focal_length_m", "detector_pitch_m", "principal_sample",
               "prior_elevation_m"),
    "pairsel": ("bh_min", "bh_max", "max_d_incidence", "max_d_azimuth",
                "min_overlap", "force_pair"),
    "adjust": ("max_tie_points", "cauchy_c_px", "ba_max_iterations",
               "ground_constraint_weight", "position_sigma_m"),
    "match": ("window_radius", "search_x", "search_y", "min_ncc",
              "left_crop", "right_crop"),
    "grid": ("cell_size_m", "search_radius_m", "idw_power", "min_samples",
             "max_miss_m"),
    "icp": ("icp_max_iterations", "icp_tolerance_m"),
    "mosaic": ("blend_len_px",),
    "validate": ("profile_step_m", "features_file", "at_ref_resolution"),
    "refine": ("refine_pass", "expanded_search_radius_m",
               "refine_position_sigma_scale"),
}

_INT_FIELDS = {"max_tie_points", "ba_max_iterations", "window_radius",
               "min_samples", "icp_max_iterations"}
_BOOL_FIELDS = {"force_pair", "at_ref_resolution", "refine_pass"}
_STR_FIELDS = {"meta1", "meta2", "left_image", "right_image", "ref_dem",
               "out_dir", "features_file"}
_TUPLE_FIELDS = {"search_x": 2, "search_y": 2, "left_crop": 4, "right_crop": 4}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if name in _STR_FIELDS:
        return raw
    if raw == "" or raw.lower() == "none":
        return None
    if name in _BOOL_FIELDS:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"boolean expected for '{name}', got '{raw}'")
    if name in _TUPLE_FIELDS:
        parts = [p for p in raw.replace(",", " ").split() if p]
        if len(parts) != _TUPLE_FIELDS[name]:
            raise ConfigError(f"'{name}' needs {_TUPLE_FIELDS[name]} integers")
        return tuple(int(p) for p in parts)
    try:
        if name in _INT_FIELDS:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"numeric value expected for '{name}', got '{raw}'") from None


def load_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    """Key-value config with section headers; overrides win over the file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = PipelineConfig()
    for section, names in _SECTION_FIELDS.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            setattr(cfg, key, _parse_value(key, raw))
    for key, value in (overrides or {}).items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown configuration field '{key}'")
        if value is not None:
            setattr(cfg, key, value)
    return cfg


# ---------------------------------------------------------------------------
# manifest plumbing
# ---------------------------------------------------------------------------

def sha256_of(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def void_fraction(dem: DemGrid) -> float:
    return float((~dem.valid).sum()) / dem.values.size


class _Run:
    def __init__(self, out_dir: Path, config: PipelineConfig):
        self.out_dir = out_dir
        self.manifest = {
            "config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in asdict(config).items()},
            "stages": [],
        }

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def record(self, stage: str, params: dict, inputs: list, outputs: list,
               metrics: dict, wall: float):
        self.manifest["stages"].append({
            "stage": stage,
            "params": params,
            "inputs": {str(p): sha256_of(p) for p in inputs},
            "outputs": {str(p): sha256_of(p) for p in outputs},
            "metrics": metrics,
            "wall_time_s": wall,
        })

    def write(self):
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return path


def _resolved_grid_params(cfg: PipelineConfig, mean_gsd: float) -> recon.GriddingParams:
    cell = cfg.cell_size_m if cfg.cell_size_m is not None else mean_gsd
    return recon.GriddingParams(
        cell_size=cell,
        search_radius=cfg.search_radius_m,
        idw_power=cfg.idw_power,
        min_samples=cfg.min_samples,
    )


def _default_profiles(dem: DemGrid, step: float):
    """Deterministic transects: three horizontal lines plus a diagonal."""
    x0 = dem.origin_x + 0.1 * (dem.x_max - dem.origin_x)
    x1 = dem.x_max - 0.1 * (dem.x_max - dem.origin_x)
    lines = []
    for frac in (0.3, 0.5, 0.7):
        y = dem.origin_y + frac * (dem.y_max - dem.origin_y)
        lines.append(((x0, y), (x1, y)))
    y0 = dem.origin_y + 0.1 * (dem.y_max - dem.origin_y)
    y1 = dem.y_max - 0.1 * (dem.y_max - dem.origin_y)
    lines.append(((x0, y0), (x1, y1)))
    return lines


def _read_features(path) -> list[tuple[float, float]]:
    feats = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}: feature rows need 'x y'")
        feats.append((float(parts[0]), float(parts[1])))
    return feats


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute all stages; returns the manifest dict (also written to disk).

    Any stage failure raises PipelineStageError after the partial manifest
    is persisted; produced artifacts stay on disk.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(out_dir, cfg)
    state: dict = {}

    def stage(name, params, inputs, fn):
        t0 = time.perf_counter()
        try:
            outputs, metrics = fn()
        except Exception as exc:
            run.write()
            raise PipelineStageError(name, exc) from exc
        run.record(name, params, inputs, outputs, metrics, time.perf_counter() - t0)

    # 1. ingest ---------------------------------------------------------
    def do_ingest():
        for key in ("meta1", "meta2", "left_image", "right_image", "ref_dem"):
            if not getattr(cfg, key):
                raise ConfigError(f"missing input path '{key}'")
        state["meta1"] = parse_meta(cfg.meta1)
        state["meta2"] = parse_meta(cfg.meta2)
        state["img1"] = read_image(cfg.left_image)
        state["img2"] = read_image(cfg.right_image)
        state["ref"] = read_dem(cfg.ref_dem)
        kw = dict(focal_length=cfg.focal_length_m,
                  detector_pitch=cfg.detector_pitch_m,
                  principal_sample=cfg.principal_sample)
        state["cam1"] = camera_from_meta(state["meta1"], **kw)
        state["cam2"] = camera_from_meta(state["meta2"], **kw)
        return [], {
            "product_ids": [state["meta1"].product_id, state["meta2"].product_id],
            "mean_gsd_m": 0.5 * (state["meta1"].gsd + state["meta2"].gsd),
        }

    stage("ingest", {"prior_elevation_m": cfg.prior_elevation_m},
          [cfg.meta1, cfg.meta2, cfg.left_image, cfg.right_image, cfg.ref_dem],
          do_ingest)

    # 2. pairsel --------------------------------------------------------
    def do_pairsel():
        thr = pairsel.PairThresholds(
            bh_min=cfg.bh_min, bh_max=cfg.bh_max,
            max_d_incidence=cfg.max_d_incidence,
            max_d_azimuth=cfg.max_d_azimuth, min_overlap=cfg.min_overlap,
        )
        geo = pairsel.pair_geometry(state["meta1"], state["meta2"])
        accepted = pairsel.passes_thresholds(geo, thr)
        csv_path = run.path("pairs.csv")
        with open(csv_path, "w") as fh:
            fh.write("id1,id2,baseline_m,bh,conv_deg,overlap,d_inc,d_az,ep_m\n")
            fh.write(
                f"{state['meta1'].product_id},{state['meta2'].product_id},"
                f"{geo.baseline:.6f},{geo.bh_ratio:.9f},{geo.convergence_deg:.6f},"
                f"{geo.overlap_fraction:.9f},{geo.d_incidence:.6f},"
                f"{geo.d_azimuth:.6f},{geo.expected_precision:.6f}\n"
            )
        if not accepted and not cfg.force_pair:
            raise StereoForgeError(
                "pair fails selection thresholds: "
                f"bh={geo.bh_ratio:.3f} (window [{thr.bh_min}, {thr.bh_max}]), "
                f"overlap={geo.overlap_fraction:.3f} (min {thr.min_overlap}), "
                f"d_inc={geo.d_incidence:.2f}, d_az={geo.d_azimuth:.2f}"
            )
        state["pair_geometry"] = geo
        return [csv_path], {
            "bh_ratio": geo.bh_ratio,
            "convergence_deg": geo.convergence_deg,
            "overlap": geo.overlap_fraction,
            "accepted": bool(accepted),
        }

    stage("pairsel",
          {k: getattr(cfg, k) for k in ("bh_min", "bh_max", "max_d_incidence",
                                        "max_d_azimuth", "min_overlap", "force_pair")},
          [cfg.meta1, cfg.meta2], do_pairsel)

    # 3. adjust ---------------------------------------------------------
    def do_adjust():
        ties = badjust.detect_tie_points(
            state["img1"], state["img2"], state["cam1"], state["cam2"],
            max_points=cfg.max_tie_points,
            prior_elevation=cfg.prior_elevation_m,
        )
        params = badjust.RobustLossParams(
            cauchy_scale_c=cfg.cauchy_c_px,
            max_iterations=cfg.ba_max_iterations,
            ground_constraint_weight=cfg.ground_constraint_weight,
            position_sigma=cfg.position_sigma_m,
        )
        result = badjust.bundle_adjust(state["cam1"], state["cam2"], ties, params)
        adj_path = run.path("cameras.adjust")
        ties_path = run.path("tiepoints.ties")
        badjust.write_adjustments(result.adjustments, adj_path)
        badjust.write_ties(ties, ties_path)
        state["ties"] = ties
        state["adj1"] = badjust.apply_adjustment(state["cam1"], result.adjustments[0])
        state["adj2"] = badjust.apply_adjustment(state["cam2"], result.adjustments[1])
        rms = badjust.reprojection_rms(state["adj1"], state["adj2"], ties,
                                       world=result.world)
        return [adj_path, ties_path], {
            "n_tie_points": len(ties),
            "final_cost": result.final_cost,
            "iterations": result.iterations,
            "hit_iteration_cap": result.hit_iteration_cap,
            "post_rms_px": rms,
        }

    stage("adjust",
          {k: getattr(cfg, k) for k in ("max_tie_points", "cauchy_c_px",
                                        "ba_max_iterations", "ground_constraint_weight",
                                        "position_sigma_m")},
          [cfg.left_image, cfg.right_image], do_adjust)

    # 4. densematch ------------------------------------------------------
    def do_match():
        ties = state["ties"]
        obs1 = np.array([[t.obs1.sample, t.obs1.line] for t in ties])
        obs2 = np.array([[t.obs2.sample, t.obs2.line] for t in ties])
        prealign = densematch.estimate_affine(obs1, obs2)
        params = densematch.MatchParams(
            window_radius=cfg.window_radius,
            search_x=cfg.search_x, search_y=cfg.search_y,
            min_ncc=cfg.min_ncc,
            left_crop=cfg.left_crop, right_crop=cfg.right_crop,
        )
        disp = densematch.match_dense(state["img1"], state["img2"], params, prealign)
        disp_path = run.path("disparity.disp")
        densematch.write_disparity(disp, disp_path)
        state["disp"] = disp
        return [disp_path], {
            "valid_fraction": float(disp.valid.mean()),
            "prealign": [list(row) for row in prealign],
        }

    stage("densematch",
          {k: getattr(cfg, k) for k in ("window_radius", "search_x", "search_y",
                                        "min_ncc", "left_crop", "right_crop")},
          [cfg.left_image, cfg.right_image, run.path("tiepoints.ties")], do_match)

    # 5. recon -----------------------------------------------------------
    def do_recon():
        cloud = recon.cloud_from_disparity(
            state["disp"], state["adj1"], state["adj2"], max_miss=cfg.max_miss_m
        )
        if len(cloud) == 0:
            raise InsufficientDataError("dense matching produced no 3-D points")
        mean_gsd = 0.5 * (state["meta1"].gsd + state["meta2"].gsd)
        gparams = _resolved_grid_params(cfg, mean_gsd)
        extent = recon.extent_of(cloud, gparams.cell_size)
        dem = recon.grid_dem(cloud, gparams, extent)
        cloud_path = run.path("cloud.xyz")
        dem_path = run.path("dem_raw.dem")
        write_cloud(cloud, cloud_path)
        write_dem(dem, dem_path)
        state["cloud"] = cloud
        state["dem_raw"] = dem
        state["gparams"] = gparams
        return [cloud_path, dem_path], {
            "n_points": len(cloud),
            "mean_miss_m": float(cloud.errors.mean()),
            "cell_size_m": gparams.cell_size,
            "void_fraction": void_fraction(dem),
            "extent": list(extent),
        }

    stage("recon",
          {k: getattr(cfg, k) for k in ("cell_size_m", "search_radius_m",
                                        "idw_power", "min_samples", "max_miss_m")},
          [run.path("disparity.disp")], do_recon)

    # 6. align -----------------------------------------------------------
    def do_align():
        icp = midalign.icp_align(
            state["cloud"], state["ref"],
            max_iter=cfg.icp_max_iterations, tol=cfg.icp_tolerance_m,
        )
        aligned_cloud = midalign.transform_cloud(state["cloud"], icp.transform)
        gparams = state["gparams"]
        extent = recon.extent_of(aligned_cloud, gparams.cell_size)
        dem_aligned = recon.grid_dem(aligned_cloud, gparams, extent)
        bias = midalign.estimate_bias(dem_aligned, state["ref"])
        dem_debiased = midalign.apply_bias(dem_aligned, bias)

        t_path = run.path("icp.transform")
        cl_path = run.path("cloud_aligned.xyz")
        da_path = run.path("dem_aligned.dem")
        db_path = run.path("dem_debiased.dem")
        midalign.write_transform(icp.transform, t_path)
        write_cloud(aligned_cloud, cl_path)
        write_dem(dem_aligned, da_path)
        write_dem(dem_debiased, db_path)
        state["dem_debiased"] = dem_debiased
        state["align_extent"] = extent
        return [t_path, cl_path, da_path, db_path], {
            "icp_rms_m": icp.final_rms,
            "icp_iterations": icp.iterations,
            "icp_converged": icp.converged,
            "bias_m": bias.delta_z,
            "void_fraction": void_fraction(dem_debiased),
            "extent": list(extent),
        }

    stage("align",
          {"icp_max_iterations": cfg.icp_max_iterations,
           "icp_tolerance_m": cfg.icp_tolerance_m},
          [run.path("cloud.xyz"), cfg.ref_dem], do_align)

    # 7. mosaic -----------------------------------------------------------
    def do_mosaic():
        primary = state["dem_debiased"]
        ref_r = mosaic.resample_to_lattice(state["ref"], primary)
        alpha = mosaic.compute_alpha(primary, blend_len=cfg.blend_len_px)
        final = mosaic.blend(primary, ref_r, alpha)
        path = run.path("dem_final.dem")
        write_dem(final, path)
        state["dem_final"] = final
        return [path], {"void_fraction": void_fraction(final)}

    stage("mosaic", {"blend_len_px": cfg.blend_len_px},
          [run.path("dem_debiased.dem"), cfg.ref_dem], do_mosaic)

    # 8. validate ----------------------------------------------------------
    def do_validate():
        dem = state["dem_debiased"]
        ref = state["ref"]
        step = cfg.profile_step_m if cfg.profile_step_m is not None \
            else 2.0 * dem.cell_size
        if cfg.at_ref_resolution:
            dem_v = validate.aggregate_to_cell_size(dem, ref.cell_size)
        else:
            dem_v = dem
        report_lines = []
        stats_all = []
        for k, (a, b) in enumerate(_default_profiles(dem_v, step)):
            try:
                pa = validate.extract_profile(dem_v, a, b, step)
                pb = validate.extract_profile(ref, a, b, step)
                stats = validate.profile_rmse(pa, pb)
            except (StereoForgeError, ValueError) as exc:
                report_lines.append(f"profile {k}: skipped ({exc})")
                continue
            stats_all.append(stats)
            report_lines.append(
                f"profile {k}: rmse_m={stats.rmse:.6f} "
                f"mean_delta_m={stats.mean_delta:.6f} n={stats.n}"
            )
        if not stats_all:
            raise InsufficientDataError("no profile produced co-valid samples")
        pooled = float(np.sqrt(
            sum(s.rmse ** 2 * s.n for s in stats_all) / sum(s.n for s in stats_all)
        ))
        report_lines.append(f"pooled: rmse_m={pooled:.6f}")

        tri_mean, tri_std = validate.triangulation_error_stats(state["cloud"])
        report_lines.append(
            f"triangulation_error: mean_m={tri_mean:.6f} std_m={tri_std:.6f}"
        )
        metrics = {
            "pooled_rmse_m": pooled,
            "triangulation_mean_m": tri_mean,
            "triangulation_std_m": tri_std,
            "n_profiles": len(stats_all),
        }
        if cfg.features_file:
            feats = _read_features(cfg.features_file)
            mean_off, _ = validate.horizontal_offset(dem_v, ref, feats)
            report_lines.append(
                f"horizontal_offset: mean_x_m={mean_off[0]:.6f} "
                f"mean_y_m={mean_off[1]:.6f}"
            )
            metrics["mean_offset_m"] = [float(mean_off[0]), float(mean_off[1])]
        path = run.path("report.txt")
        path.write_text("\n".join(report_lines) + "\n")
        return [path], metrics

    stage("validate",
          {"profile_step_m": cfg.profile_step_m,
           "at_ref_resolution": cfg.at_ref_resolution},
          [run.path("dem_debiased.dem"), cfg.ref_dem], do_validate)

    run.write()
    state["manifest"] = run.manifest
    return run.manifest


# ---------------------------------------------------------------------------
# refine pass
# ---------------------------------------------------------------------------

def run_refine_pass(cfg: PipelineConfig, first_manifest: dict | None = None) -> dict:
    """ICP-informed second pass: re-seeded bundle adjustment, re-match,
    expanded-radius re-grid on the first pass's lattice, re-align."""
    out_dir = Path(cfg.out_dir)
    manifest_path = out_dir / "manifest.json"
    if first_manifest is None:
        if not manifest_path.exists():
            raise StereoForgeError(f"refine pass needs a completed run in {out_dir}")
        first_manifest = json.loads(manifest_path.read_text())

    by_stage = {s["stage"]: s for s in first_manifest["stages"]}
    for needed in ("adjust", "align", "recon"):
        if needed not in by_stage:
            raise StereoForgeError(f"refine pass needs first-run stage '{needed}'")
    for artifact in ("cameras.adjust", "tiepoints.ties", "icp.transform",
                     "dem_debiased.dem"):
        if not (out_dir / artifact).exists():
            raise StereoForgeError(f"refine pass missing artifact '{artifact}'")

    run = _Run(out_dir, cfg)
    run.manifest = first_manifest
    state: dict = {}

    def stage(name, params, inputs, fn):
        t0 = time.perf_counter()
        try:
            outputs, metrics = fn()
        except Exception as exc:
            run.write()
            raise PipelineStageError(name, exc) from exc
        run.record(name, params, inputs, outputs, metrics, time.perf_counter() - t0)

    meta1 = parse_meta(cfg.meta1)
    meta2 = parse_meta(cfg.meta2)
    img1 = read_image(cfg.left_image)
    img2 = read_image(cfg.right_image)
    ref = read_dem(cfg.ref_dem)
    kw = dict(focal_length=cfg.focal_length_m, detector_pitch=cfg.detector_pitch_m,
              principal_sample=cfg.principal_sample)
    cam1 = camera_from_meta(meta1, **kw)
    cam2 = camera_from_meta(meta2, **kw)
    adj1_first, adj2_first = badjust.read_adjustments(out_dir / "cameras.adjust")
    ties = badjust.read_ties(out_dir / "tiepoints.ties")
    icp_first = midalign.read_transform(out_dir / "icp.transform")
    dem_before = read_dem(out_dir / "dem_debiased.dem")
    void_before = void_fraction(dem_before)

    # refine_adjust: ICP transform re-seeds the cameras, tightened prior
    def do_refine_adjust():
        seeded1 = transform_camera(badjust.apply_adjustment(cam1, adj1_first), icp_first)
        seeded2 = transform_camera(badjust.apply_adjustment(cam2, adj2_first), icp_first)
        o1, d1 = back_project_many(
            seeded1, [t.obs1.sample for t in ties], [t.obs1.line for t in ties])
        o2, d2 = back_project_many(
            seeded2, [t.obs2.sample for t in ties], [t.obs2.line for t in ties])
        pos, miss = recon.triangulate_many(o1, d1, o2, d2)
        reseeded = [
            badjust.TiePoint(t.obs1, t.obs2,
                             pos[k] if np.isfinite(miss[k]) else t.world)
            for k, t in enumerate(ties)
        ]
        params = badjust.RobustLossParams(
            cauchy_scale_c=cfg.cauchy_c_px,
            max_iterations=cfg.ba_max_iterations,
            ground_constraint_weight=cfg.ground_constraint_weight,
            position_sigma=cfg.position_sigma_m * cfg.refine_position_sigma_scale,
        )
        result = badjust.bundle_adjust(seeded1, seeded2, reseeded, params)
        state["radj1"] = badjust.apply_adjustment(seeded1, result.adjustments[0])
        state["radj2"] = badjust.apply_adjustment(seeded2, result.adjustments[1])
        state["rties"] = reseeded
        path = out_dir / "refine_cameras.adjust"
        badjust.write_adjustments(result.adjustments, path)
        return [path], {
            "final_cost": result.final_cost,
            "iterations": result.iterations,
            "position_sigma_m": params.position_sigma,
        }

    stage("refine_adjust",
          {"position_sigma_scale": cfg.refine_position_sigma_scale},
          [out_dir / "cameras.adjust", out_dir / "tiepoints.ties",
           out_dir / "icp.transform"], do_refine_adjust)

    # refine_match + recon with expanded gridding radius on the old lattice
    def do_refine_recon():
        ties_r = state["rties"]
        obs1 = np.array([[t.obs1.sample, t.obs1.line] for t in ties_r])
        obs2 = np.array([[t.obs2.sample, t.obs2.line] for t in ties_r])
        prealign = densematch.estimate_affine(obs1, obs2)
        params = densematch.MatchParams(
            window_radius=cfg.window_radius,
            search_x=cfg.search_x, search_y=cfg.search_y,
            min_ncc=cfg.min_ncc,
            left_crop=cfg.left_crop, right_crop=cfg.right_crop,
        )
        disp = densematch.match_dense(img1, img2, params, prealign)
        cloud = recon.cloud_from_disparity(disp, state["radj1"], state["radj2"],
                                           max_miss=cfg.max_miss_m)
        if len(cloud) == 0:
            raise InsufficientDataError("refine matching produced no 3-D points")
        mean_gsd = 0.5 * (meta1.gsd + meta2.gsd)
        base = _resolved_grid_params(cfg, mean_gsd)
        expanded = cfg.expanded_search_radius_m if cfg.expanded_search_radius_m \
            is not None else 2.0 * base.radius
        gparams = recon.GriddingParams(
            cell_size=base.cell_size, search_radius=expanded,
            idw_power=base.idw_power, min_samples=base.min_samples,
        )
        state["rcloud"] = cloud
        state["rgparams"] = gparams
        disp_path = out_dir / "refine_disparity.disp"
        cloud_path = out_dir / "refine_cloud.xyz"
        densematch.write_disparity(disp, disp_path)
        write_cloud(cloud, cloud_path)
        return [disp_path, cloud_path], {
            "valid_fraction": float(disp.valid.mean()),
            "n_points": len(cloud),
            "expanded_search_radius_m": expanded,
        }

    stage("refine_recon",
          {"expanded_search_radius_m": cfg.expanded_search_radius_m},
          [cfg.left_image, cfg.right_image], do_refine_recon)

    # refine_align: re-register and re-grid on the first pass's lattice
    def do_refine_align():
        icp = midalign.icp_align(state["rcloud"], ref,
                                 max_iter=cfg.icp_max_iterations,
                                 tol=cfg.icp_tolerance_m)
        aligned = midalign.transform_cloud(state["rcloud"], icp.transform)
        extent = (dem_before.origin_x, dem_before.origin_y,
                  dem_before.x_max, dem_before.y_max)
        dem_aligned = recon.grid_dem(aligned, state["rgparams"], extent)
        bias = midalign.estimate_bias(dem_aligned, ref)
        dem_debiased = midalign.apply_bias(dem_aligned, bias)
        void_after = void_fraction(dem_debiased)
        t_path = out_dir / "refine_icp.transform"
        d_path = out_dir / "refine_dem_debiased.dem"
        midalign.write_transform(icp.transform, t_path)
        write_dem(dem_debiased, d_path)
        state["refine_dem"] = dem_debiased
        return [t_path, d_path], {
            "icp_rms_m": icp.final_rms,
            "bias_m": bias.delta_z,
            "void_fraction_before": void_before,
            "void_fraction_after": void_after,
        }

    stage("refine_align",
          {"icp_max_iterations": cfg.icp_max_iterations},
          [cfg.ref_dem], do_refine_align)

    run.write()
    return run.manifest
