"""Command-line entry point: ``stereoforge <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 stage/processing error,
4 insufficient data.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import adjust as badjust
from . import align as midalign
from . import densematch, mosaic, pairsel, pipeline, recon, synth, validate
from ._backend import HAVE_NUMBA
from .errors import ConfigError, InsufficientDataError, StereoForgeError
from .ingest import (
    camera_from_meta,
    parse_meta,
    read_cloud,
    read_dem,
    read_image,
    write_cloud,
    write_dem,
    write_image,
    write_meta,
)


def _crop(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("crop needs x,y,w,h")
    return tuple(int(p) for p in parts)


def _range(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("range needs min,max")
    return (int(parts[0]), int(parts[1]))


def _load_cameras(args):
    meta1 = parse_meta(args.meta1)
    meta2 = parse_meta(args.meta2)
    kw = dict(
        focal_length=getattr(args, "focal_length", None),
        detector_pitch=getattr(args, "detector_pitch", None),
        principal_sample=getattr(args, "principal_sample", None),
    )
    return meta1, meta2, camera_from_meta(meta1, **kw), camera_from_meta(meta2, **kw)


def _cameras_with_adjustments(args):
    _, _, cam1, cam2 = _load_cameras(args)
    if getattr(args, "adjust", None):
        adj1, adj2 = badjust.read_adjustments(args.adjust)
        cam1 = badjust.apply_adjustment(cam1, adj1)
        cam2 = badjust.apply_adjustment(cam2, adj2)
    return cam1, cam2


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_synth(args):
    spec = synth.parse_scene_spec(args.spec)
    if args.seed is not None:
        spec.albedo_texture_seed = args.seed
    fx = synth.make_stereo_fixture(
        spec, bh_target=args.bh, gsd=args.gsd, altitude=args.altitude,
        n_lines=args.n_lines, n_samples=args.n_samples,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_image(fx.img1, out / "left.pgm")
    write_image(fx.img2, out / "right.pgm")
    write_meta(fx.meta1, out / "left.meta")
    write_meta(fx.meta2, out / "right.meta")
    write_dem(fx.truth, out / "truth.dem")
    print(f"synth: wrote stereo fixture to {out}")
    return 0


def cmd_pairs(args):
    metas = []
    for path in sorted(Path(args.meta_dir).glob("*.meta")):
        metas.append(parse_meta(path))
    if len(metas) < 2:
        raise InsufficientDataError(f"found {len(metas)} sidecars in {args.meta_dir}")
    thr = pairsel.PairThresholds(
        bh_min=args.bh_min, bh_max=args.bh_max,
        max_d_incidence=args.max_di, max_d_azimuth=args.max_da,
        min_overlap=args.min_overlap,
    )
    ranked = pairsel.rank_pairs(metas, thr)
    with open(args.out, "w") as fh:
        fh.write("id1,id2,baseline_m,bh,conv_deg,overlap,d_inc,d_az,ep_m\n")
        for (id1, id2), geo in ranked:
            fh.write(
                f"{id1},{id2},{geo.baseline:.6f},{geo.bh_ratio:.9f},"
                f"{geo.convergence_deg:.6f},{geo.overlap_fraction:.9f},"
                f"{geo.d_incidence:.6f},{geo.d_azimuth:.6f},"
                f"{geo.expected_precision:.6f}\n"
            )
    print(f"pairs: {len(ranked)} accepted pair(s) -> {args.out}")
    return 0


def cmd_adjust(args):
    _, _, cam1, cam2 = _load_cameras(args)
    img1 = read_image(args.left)
    img2 = read_image(args.right)
    ties = badjust.detect_tie_points(
        img1, img2, cam1, cam2,
        max_points=args.max_points, prior_elevation=args.prior_elevation,
    )
    params = badjust.RobustLossParams(
        cauchy_scale_c=args.cauchy_c, max_iterations=args.max_iter,
        ground_constraint_weight=args.ground_weight,
        position_sigma=args.position_sigma,
    )
    result = badjust.bundle_adjust(cam1, cam2, ties, params)
    badjust.write_adjustments(result.adjustments, args.out)
    ties_out = args.out_ties or str(args.out) + ".ties"
    badjust.write_ties(ties, ties_out)
    print(
        f"adjust: {len(ties)} ties, cost {result.final_cost:.3e} "
        f"after {result.iterations} iterations -> {args.out}"
    )
    return 0


def cmd_match(args):
    img1 = read_image(args.left)
    img2 = read_image(args.right)
    prealign = None
    if args.ties:
        ties = badjust.read_ties(args.ties)
        obs1 = np.array([[t.obs1.sample, t.obs1.line] for t in ties])
        obs2 = np.array([[t.obs2.sample, t.obs2.line] for t in ties])
        prealign = densematch.estimate_affine(obs1, obs2)
    params = densematch.MatchParams(
        window_radius=args.window,
        search_x=args.search_x, search_y=args.search_y,
        min_ncc=args.min_ncc,
        left_crop=args.left_crop, right_crop=args.right_crop,
    )
    disp = densematch.match_dense(img1, img2, params, prealign)
    densematch.write_disparity(disp, args.out)
    print(f"match: valid fraction {disp.valid.mean():.3f} -> {args.out}")
    return 0


def cmd_triangulate(args):
    disp = densematch.read_disparity(args.disparity)
    cam1, cam2 = _cameras_with_adjustments(args)
    cloud = recon.cloud_from_disparity(disp, cam1, cam2, max_miss=args.max_miss)
    write_cloud(cloud, args.out)
    print(f"triangulate: {len(cloud)} points -> {args.out}")
    return 0


def cmd_grid(args):
    cloud = read_cloud(args.cloud)
    params = recon.GriddingParams(
        cell_size=args.cell_size, search_radius=args.search_radius,
        idw_power=args.power, min_samples=args.min_samples,
    )
    extent = recon.extent_of(cloud, params.cell_size)
    dem = recon.grid_dem(cloud, params, extent)
    write_dem(dem, args.out)
    print(f"grid: {dem.n_cols}x{dem.n_rows} cells, "
          f"void fraction {pipeline.void_fraction(dem):.3f} -> {args.out}")
    return 0


def cmd_icp(args):
    cloud = read_cloud(args.cloud)
    ref = read_dem(args.ref)
    res = midalign.icp_align(cloud, ref, max_iter=args.max_iter, tol=args.tol)
    midalign.write_transform(res.transform, args.out_transform)
    if args.out_cloud:
        write_cloud(midalign.transform_cloud(cloud, res.transform), args.out_cloud)
    print(
        f"icp: rms {res.final_rms:.4f} m after {res.iterations} iterations "
        f"(converged={res.converged}) -> {args.out_transform}"
    )
    return 0


def cmd_debias(args):
    dem = read_dem(args.dem)
    ref = read_dem(args.ref)
    corr = midalign.estimate_bias(dem, ref)
    out = midalign.apply_bias(dem, corr)
    write_dem(out, args.out)
    print(f"debias: removed {corr.delta_z:.4f} m over {corr.n_samples} samples "
          f"-> {args.out}")
    return 0


def cmd_mosaic(args):
    primary = read_dem(args.primary)
    ref = read_dem(args.ref)
    ref_r = mosaic.resample_to_lattice(ref, primary)
    alpha = mosaic.compute_alpha(primary, blend_len=args.blend_len)
    out = mosaic.blend(primary, ref_r, alpha)
    write_dem(out, args.out)
    print(f"mosaic: void fraction {pipeline.void_fraction(out):.3f} -> {args.out}")
    return 0


def cmd_validate(args):
    dem = read_dem(args.dem)
    ref = read_dem(args.ref)
    if args.at_ref_resolution:
        dem = validate.aggregate_to_cell_size(dem, ref.cell_size)
    step = args.profile_step if args.profile_step else 2.0 * dem.cell_size
    lines = []
    stats_all = []
    endpoints = []
    for raw in Path(args.profiles).read_text().splitlines():
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        vals = [float(p) for p in text.split()]
        if len(vals) != 4:
            raise ConfigError(f"{args.profiles}: profile rows need 'x1 y1 x2 y2'")
        endpoints.append(((vals[0], vals[1]), (vals[2], vals[3])))
    for k, (a, b) in enumerate(endpoints):
        pa = validate.extract_profile(dem, a, b, step)
        pb = validate.extract_profile(ref, a, b, step)
        stats = validate.profile_rmse(pa, pb)
        stats_all.append(stats)
        lines.append(f"profile {k}: rmse_m={stats.rmse:.6f} "
                     f"mean_delta_m={stats.mean_delta:.6f} n={stats.n}")
    if not stats_all:
        raise InsufficientDataError("no profiles supplied")
    pooled = float(np.sqrt(
        sum(s.rmse ** 2 * s.n for s in stats_all) / sum(s.n for s in stats_all)
    ))
    lines.append(f"pooled: rmse_m={pooled:.6f}")
    if args.features:
        feats = pipeline._read_features(args.features)
        mean_off, _ = validate.horizontal_offset(dem, ref, feats)
        lines.append(f"horizontal_offset: mean_x_m={mean_off[0]:.6f} "
                     f"mean_y_m={mean_off[1]:.6f}")
    if args.cloud:
        mean, std = validate.triangulation_error_stats(read_cloud(args.cloud))
        lines.append(f"triangulation_error: mean_m={mean:.6f} std_m={std:.6f}")
    Path(args.report).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _run_overrides(args):
    return {
        "meta1": args.meta1, "meta2": args.meta2,
        "left_image": args.left, "right_image": args.right,
        "ref_dem": args.ref, "out_dir": args.out_dir,
    }


def cmd_run(args):
    cfg = pipeline.load_config(args.config, overrides=_run_overrides(args))
    manifest = pipeline.run_pipeline(cfg)
    if cfg.refine_pass:
        manifest = pipeline.run_refine_pass(cfg, manifest)
    print(f"run: {len(manifest['stages'])} stages -> {cfg.out_dir}/manifest.json")
    return 0


def cmd_refine(args):
    cfg = pipeline.load_config(args.config, overrides=_run_overrides(args))
    manifest = pipeline.run_refine_pass(cfg)
    last = manifest["stages"][-1]["metrics"]
    print(
        f"refine: void fraction {last['void_fraction_before']:.4f} -> "
        f"{last['void_fraction_after']:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereoforge",
        description="Sub-metre DEM reconstruction from pushbroom stereo imagery",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="numba thread count")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scene texture seed (synth)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic stereo fixture")
    p.add_argument("--spec", required=True)
    p.add_argument("--bh", type=float, required=True)
    p.add_argument("--gsd", type=float, required=True)
    p.add_argument("--altitude", type=float, required=True)
    p.add_argument("--n-lines", type=int, default=512)
    p.add_argument("--n-samples", type=int, default=512)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pairs", help="rank viable stereo pairs from sidecars")
    p.add_argument("--meta-dir", required=True)
    p.add_argument("--bh-min", type=float, default=0.3)
    p.add_argument("--bh-max", type=float, default=0.9)
    p.add_argument("--max-di", type=float, default=10.0)
    p.add_argument("--max-da", type=float, default=20.0)
    p.add_argument("--min-overlap", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pairs)

    p = sub.add_parser("adjust", help="detect ties and bundle-adjust cameras")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--meta1", required=True)
    p.add_argument("--meta2", required=True)
    p.add_argument("--max-points", type=int, default=64)
    p.add_argument("--cauchy-c", type=float, default=2.0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--ground-weight", type=float, default=1.0)
    p.add_argument("--position-sigma", type=float, default=50.0)
    p.add_argument("--prior-elevation", type=float, default=0.0)
    p.add_argument("--focal-length", type=float, default=None)
    p.add_argument("--detector-pitch", type=float, default=None)
    p.add_argument("--principal-sample", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--out-ties", default=None,
                   help="tie point file (default: <out>.ties)")
    p.set_defaults(fn=cmd_adjust)

    p = sub.add_parser("match", help="dense NCC disparity matching")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--adjust", default=None,
                   help="camera adjustment file (provenance only)")
    p.add_argument("--ties", default=None,
                   help="tie point file providing the affine pre-alignment")
    p.add_argument("--left-crop", type=_crop, default=None)
    p.add_argument("--right-crop", type=_crop, default=None)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--search-x", type=_range, default=(-16, 16))
    p.add_argument("--search-y", type=_range, default=(-3, 3))
    p.add_argument("--min-ncc", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("triangulate", help="disparity to 3-D point cloud")
    p.add_argument("--disparity", required=True)
    p.add_argument("--meta1", required=True)
    p.add_argument("--meta2", required=True)
    p.add_argument("--adjust", default=None)
    p.add_argument("--max-miss", type=float, default=5.0)
    p.add_argument("--focal-length", type=float, default=None)
    p.add_argument("--detector-pitch", type=float, default=None)
    p.add_argument("--principal-sample", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_triangulate)

    p = sub.add_parser("grid", help="grid a point cloud into a DEM")
    p.add_argument("--cloud", required=True)
    p.add_argument("--cell-size", type=float, required=True)
    p.add_argument("--search-radius", type=float, default=None)
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--min-samples", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("icp", help="align a cloud to a reference DEM")
    p.add_argument("--cloud", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out-transform", required=True)
    p.add_argument("--out-cloud", default=None)
    p.set_defaults(fn=cmd_icp)

    p = sub.add_parser("debias", help="remove a constant vertical offset")
    p.add_argument("--dem", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_debias)

    p = sub.add_parser("mosaic", help="fill voids and feather into a reference")
    p.add_argument("--primary", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--blend-len", type=float, default=14.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mosaic)

    p = sub.add_parser("validate", help="profile RMSE and feature offsets")
    p.add_argument("--dem", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--profiles", required=True,
                   help="file of 'x1 y1 x2 y2' endpoint rows")
    p.add_argument("--features", default=None, help="file of 'x y' rows")
    p.add_argument("--cloud", default=None,
                   help="triangulated cloud for miss-distance statistics")
    p.add_argument("--at-ref-resolution", action="store_true")
    p.add_argument("--profile-step", type=float, default=None)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_validate)

    for name, fn in (("run", cmd_run), ("refine", cmd_refine)):
        p = sub.add_parser(name, help=f"{name} the pipeline from a config file")
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--meta1", default=None)
        p.add_argument("--meta2", default=None)
        p.add_argument("--left", default=None)
        p.add_argument("--right", default=None)
        p.add_argument("--ref", default=None)
        p.set_defaults(fn=fn)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and HAVE_NUMBA:
        import numba

        numba.set_num_threads(args.threads)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except pipeline.PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.original, InsufficientDataError):
            return 4
        if isinstance(exc.original, ConfigError):
            return 2
        return 3
    except StereoForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
