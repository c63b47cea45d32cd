"""Hot-kernel benchmark: numba builds against the pure-numpy fallbacks.

Runs each kernel once per backend (after a numba warm-up call) over
representative problem sizes and prints a timing table. Select sizes with
--scale {small,full}.

    python benchmarks/bench_kernels.py --scale full
"""

import argparse
import os
import time

import numpy as np


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def with_backend(flag, fn):
    old = os.environ.get("STEREOFORGE_NUMBA")
    os.environ["STEREOFORGE_NUMBA"] = flag
    try:
        return timed(fn)
    finally:
        if old is None:
            os.environ.pop("STEREOFORGE_NUMBA", None)
        else:
            os.environ["STEREOFORGE_NUMBA"] = old


def bench_render(n_px):
    from stereoforge import synth

    spec = synth.SceneSpec(
        extent=(0.45 * n_px, 0.45 * n_px),
        craters=((0.0, 10.0, 0.12 * n_px * 0.3, 3.0),),
        noise_amplitude=0.3, albedo_texture_seed=3,
    )
    truth = synth.make_terrain(spec, 0.15)
    cam = synth._fixture_camera(-1.0, 0.5, 100e3, 0.0, 0.3, n_px, n_px, 5e-6, 0.0)

    def run():
        return synth.render_pushbroom(truth, cam, spec).values

    _, warm = with_backend("1", run)  # compile
    a, t_nb = with_backend("1", run)
    b, t_np = with_backend("0", run)
    assert np.array_equal(a, b)
    return f"render {n_px}x{n_px}", t_nb, t_np


def bench_match(n_px):
    from stereoforge import synth
    from stereoforge.densematch import MatchParams, match_dense
    from stereoforge.ingest import RasterImage

    y, x = np.mgrid[0:n_px, 0:n_px + 4].astype(float)
    base = 1000.0 + 400.0 * (synth.band_noise(x, y, 12.0, 5)
                             + 0.3 * synth.band_noise(x, y, 4.0, 77))
    img1 = RasterImage(base[:, 4:])
    img2 = RasterImage(base[:, :n_px])

    def run():
        return match_dense(img1, img2, MatchParams())

    with_backend("1", run)
    a, t_nb = with_backend("1", run)
    b, t_np = with_backend("0", run)
    assert np.array_equal(a.dx, b.dx)
    return f"ncc match {n_px}x{n_px}", t_nb, t_np


def bench_grid(n_points):
    from stereoforge.ingest import PointCloud
    from stereoforge.recon import GriddingParams, grid_dem

    rng = np.random.default_rng(0)
    span = np.sqrt(n_points) * 0.3
    cloud = PointCloud(np.column_stack([
        rng.uniform(0, span, n_points),
        rng.uniform(0, span, n_points),
        rng.normal(0.0, 2.0, n_points),
    ]))
    params = GriddingParams(cell_size=0.3)
    extent = (0.0, 0.0, span, span)

    def run():
        return grid_dem(cloud, params, extent).values

    with_backend("1", run)
    a, t_nb = with_backend("1", run)
    b, t_np = with_backend("0", run)
    assert np.allclose(a, b, atol=1e-9)
    return f"idw grid {n_points} pts", t_nb, t_np


def bench_chamfer(n_px):
    from stereoforge.mosaic import chamfer_distance

    rng = np.random.default_rng(1)
    mask = rng.random((n_px, n_px)) > 0.25

    def run():
        return chamfer_distance(mask)

    with_backend("1", run)
    a, t_nb = with_backend("1", run)
    b, t_np = with_backend("0", run)
    assert np.array_equal(a, b)
    return f"chamfer {n_px}x{n_px}", t_nb, t_np


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scale", choices=("small", "full"), default="small")
    args = parser.parse_args()

    if args.scale == "full":
        cases = [
            lambda: bench_render(512),
            lambda: bench_match(512),
            lambda: bench_grid(250_000),
            lambda: bench_chamfer(2048),
        ]
    else:
        cases = [
            lambda: bench_render(128),
            lambda: bench_match(128),
            lambda: bench_grid(20_000),
            lambda: bench_chamfer(512),
        ]

    print(f"{'kernel':<24} {'numba [s]':>10} {'numpy [s]':>10} {'speedup':>8}")
    print("-" * 56)
    for case in cases:
        name, t_nb, t_np = case()
        print(f"{name:<24} {t_nb:>10.3f} {t_np:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
