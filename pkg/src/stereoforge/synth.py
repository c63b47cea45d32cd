"""Synthetic terrains and rendered pushbroom stereo fixtures.

Ground truth is an analytic surface (base plane + parabolic crater bowls
with raised rims + band-limited seeded value noise) sampled onto a grid.
Images are rendered by intersecting each pixel's viewing ray with the
bilinear truth surface and shading it Lambertian with a multiplicative
albedo texture, which gives block matching realistic traction.

Camera placement models a spherical body in the local frame: the two
fixture cameras sit at equal orbital radius (body radius + altitude) and
equal angular offset from the imaged strip, so the chord baseline and the
reported altitude reproduce the slight underestimate of the two-argument
convergence approximation at high baseline-to-height ratios.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._backend import njit, numba_enabled, prange
from .errors import DomainError, ExtentError, ParseError
from .geom import PushbroomCamera, Intrinsics, look_at_orientation, states_at_lines, _detector_direction
from .ingest import AcquisitionMeta, DemGrid, RasterImage

MOON_RADIUS_M = 1_737_400.0
GROUND_SPEED_M_S = 1600.0
RADIANCE_SCALE = 20000.0
EPHEMERIS_SAMPLES = 5


@dataclass
class SceneSpec:
    """Analytic terrain description; everything derives from the seeds."""

    extent: tuple[float, float] = (200.0, 200.0)   # metres (x, y)
    base_elevation: float = 0.0
    craters: tuple[tuple[float, float, float, float], ...] = ()  # (cx, cy, radius, depth)
    noise_amplitude: float = 0.5
    albedo_texture_seed: int = 1
    sun_incidence: float = 35.0      # degrees from vertical
    sun_azimuth: float = 90.0        # degrees clockwise from north (+y)
    albedo_amplitude: float = 0.2    # fraction of mean radiance

    def __post_init__(self):
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise DomainError("extent must be positive")
        for cx, cy, radius, depth in self.craters:
            if radius <= 0 or depth <= 0:
                raise DomainError("crater radius and depth must be positive")

    def sun_vector(self) -> np.ndarray:
        inc = math.radians(self.sun_incidence)
        az = math.radians(self.sun_azimuth)
        return np.array(
            [math.sin(inc) * math.sin(az), math.sin(inc) * math.cos(az), math.cos(inc)]
        )


def parse_scene_spec(path) -> SceneSpec:
    """Read a key-value scene file; `crater = cx cy radius depth` may repeat."""
    scalars: dict[str, float] = {}
    craters = []
    key_re = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = key_re.match(line)
        if not m:
            raise ParseError(f"{path}:{lineno}: expected 'key = value'")
        key, value = m.group(1), m.group(2)
        try:
            if key == "crater":
                parts = [float(p) for p in value.split()]
                if len(parts) != 4:
                    raise ValueError
                craters.append(tuple(parts))
            else:
                scalars[key] = float(value)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad value for '{key}'") from None
    return SceneSpec(
        extent=(scalars.get("extent_x_m", 200.0), scalars.get("extent_y_m", 200.0)),
        base_elevation=scalars.get("base_elevation_m", 0.0),
        craters=tuple(craters),
        noise_amplitude=scalars.get("noise_amplitude_m", 0.5),
        albedo_texture_seed=int(scalars.get("albedo_seed", 1)),
        sun_incidence=scalars.get("sun_incidence_deg", 35.0),
        sun_azimuth=scalars.get("sun_azimuth_deg", 90.0),
        albedo_amplitude=scalars.get("albedo_amplitude", 0.2),
    )


# ---------------------------------------------------------------------------
# seeded value noise
# ---------------------------------------------------------------------------

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xC2B2AE3D27D4EB4F)
_MIX3 = np.uint64(0xD6E8FEB86659FD93)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """splitmix64-style lattice hash -> uniform [0, 1)."""
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.uint64) * _MIX1
            ^ iy.astype(np.uint64) * _MIX2
            ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _MIX3
        )
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return h.astype(np.float64) / 18446744073709551616.0


def _value_noise(x: np.ndarray, y: np.ndarray, wavelength: float, seed: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1] at metric coordinates."""
    gx = np.asarray(x, dtype=float) / wavelength
    gy = np.asarray(y, dtype=float) / wavelength
    ix = np.floor(gx).astype(np.int64)
    iy = np.floor(gy).astype(np.int64)
    fx = gx - ix
    fy = gy - iy
    u = fx * fx * (3.0 - 2.0 * fx)
    v = fy * fy * (3.0 - 2.0 * fy)
    h00 = _hash01(ix, iy, seed)
    h10 = _hash01(ix + 1, iy, seed)
    h01 = _hash01(ix, iy + 1, seed)
    h11 = _hash01(ix + 1, iy + 1, seed)
    return (
        h00 * (1 - u) * (1 - v)
        + h10 * u * (1 - v)
        + h01 * (1 - u) * v
        + h11 * u * v
    )


def band_noise(x, y, base_wavelength: float, seed: int, octaves: int = 3) -> np.ndarray:
    """Multi-octave value noise scaled to [-1, 1]."""
    total = np.zeros(np.broadcast(x, y).shape)
    weight_sum = 0.0
    for k in range(octaves):
        w = 0.5 ** k
        total = total + w * _value_noise(x, y, base_wavelength / (2 ** k), seed + k)
        weight_sum += w
    return 2.0 * (total / weight_sum) - 1.0


# ---------------------------------------------------------------------------
# terrain
# ---------------------------------------------------------------------------

def _crater_profile(r: np.ndarray, radius: float, depth: float) -> np.ndarray:
    """Parabolic bowl with a raised rim decaying to zero at 1.5 radii."""
    rim = 0.2 * depth
    bowl = -depth + (depth + rim) * (r / radius) ** 2
    ramp = np.clip(1.0 - (r - radius) / (0.5 * radius), 0.0, 1.0)
    return np.where(r <= radius, bowl, rim * ramp ** 2)


def make_terrain(spec: SceneSpec, cell_size: float) -> DemGrid:
    """Sample the analytic scene onto a grid centred on the origin."""
    if cell_size <= 0:
        raise DomainError("cell_size must be positive")
    n_cols = int(math.ceil(spec.extent[0] / cell_size))
    n_rows = int(math.ceil(spec.extent[1] / cell_size))
    origin_x = -0.5 * n_cols * cell_size
    origin_y = -0.5 * n_rows * cell_size
    cols = np.arange(n_cols)
    rows = np.arange(n_rows)
    x = origin_x + (cols + 0.5) * cell_size
    y = origin_y + (n_rows - rows - 0.5) * cell_size
    xm, ym = np.meshgrid(x, y)

    z = np.full((n_rows, n_cols), float(spec.base_elevation))
    for cx, cy, radius, depth in spec.craters:
        r = np.hypot(xm - cx, ym - cy)
        inside = r <= 1.5 * radius
        if np.any(inside):
            z[inside] += _crater_profile(r[inside], radius, depth)
    if spec.noise_amplitude > 0:
        wavelength = max(spec.extent) / 12.0
        z += spec.noise_amplitude * band_noise(
            xm, ym, wavelength, spec.albedo_texture_seed + 0x5EED
        )
    return DemGrid(origin_x, origin_y, cell_size, z)


def albedo_texture(truth: DemGrid, spec: SceneSpec) -> np.ndarray:
    """Multiplicative reflectance field on the truth lattice."""
    cols = np.arange(truth.n_cols)
    rows = np.arange(truth.n_rows)
    xm, ym = np.meshgrid(truth.cell_center_x(cols), truth.cell_center_y(rows))
    tex = band_noise(xm, ym, 8.0 * truth.cell_size, spec.albedo_texture_seed)
    return np.clip(1.0 + spec.albedo_amplitude * tex, 0.05, None)


# ---------------------------------------------------------------------------
# rendering kernels (numba build and numpy fallback share step logic exactly)
# ---------------------------------------------------------------------------

def _render_impl(values, valid, gx, gy, gvalid, albedo,
                 origin_x, origin_y, cell,
                 origins, dirs, sun, z_lo, z_hi, out):
    nrows, ncols = values.shape
    n_lines = out.shape[0]
    n_samples = out.shape[1]
    top = origin_y + nrows * cell
    for l in prange(n_lines):
        for s in range(n_samples):
            ox = origins[l, s, 0]
            oy = origins[l, s, 1]
            oz = origins[l, s, 2]
            dx = dirs[l, s, 0]
            dy = dirs[l, s, 1]
            dz = dirs[l, s, 2]
            if dz >= -1e-12:
                out[l, s] = 0.0
                continue
            t0 = (z_hi - oz) / dz
            if t0 < 0.0:
                t0 = 0.0
            t1 = (z_lo - oz) / dz
            amax = abs(dx)
            if abs(dy) > amax:
                amax = abs(dy)
            if abs(dz) > amax:
                amax = abs(dz)
            dt = 0.5 * cell / amax

            found = False
            prev_ok = False
            prev_f = 0.0
            prev_t = t0
            lo = t0
            hi = t0
            k = 0
            while True:
                t = t0 + k * dt
                if t > t1:
                    break
                x = ox + t * dx
                y = oy + t * dy
                z = oz + t * dz
                col = (x - origin_x) / cell - 0.5
                row = (top - y) / cell - 0.5
                r0 = int(np.floor(row))
                c0 = int(np.floor(col))
                ok = (
                    0 <= r0 <= nrows - 2
                    and 0 <= c0 <= ncols - 2
                    and valid[r0, c0] != 0
                    and valid[r0, c0 + 1] != 0
                    and valid[r0 + 1, c0] != 0
                    and valid[r0 + 1, c0 + 1] != 0
                )
                if ok:
                    fr = row - r0
                    fc = col - c0
                    h = (
                        values[r0, c0] * (1 - fr) * (1 - fc)
                        + values[r0, c0 + 1] * (1 - fr) * fc
                        + values[r0 + 1, c0] * fr * (1 - fc)
                        + values[r0 + 1, c0 + 1] * fr * fc
                    )
                    f = z - h
                    if prev_ok and prev_f > 0.0 and f <= 0.0:
                        lo = prev_t
                        hi = t
                        found = True
                        break
                    prev_ok = True
                    prev_f = f
                    prev_t = t
                else:
                    prev_ok = False
                k += 1

            if not found:
                out[l, s] = 0.0
                continue

            for _ in range(40):
                mid = 0.5 * (lo + hi)
                x = ox + mid * dx
                y = oy + mid * dy
                z = oz + mid * dz
                col = (x - origin_x) / cell - 0.5
                row = (top - y) / cell - 0.5
                r0 = int(np.floor(row))
                c0 = int(np.floor(col))
                f = 1.0
                if (
                    0 <= r0 <= nrows - 2
                    and 0 <= c0 <= ncols - 2
                    and valid[r0, c0] != 0
                    and valid[r0, c0 + 1] != 0
                    and valid[r0 + 1, c0] != 0
                    and valid[r0 + 1, c0 + 1] != 0
                ):
                    fr = row - r0
                    fc = col - c0
                    h = (
                        values[r0, c0] * (1 - fr) * (1 - fc)
                        + values[r0, c0 + 1] * (1 - fr) * fc
                        + values[r0 + 1, c0] * fr * (1 - fc)
                        + values[r0 + 1, c0 + 1] * fr * fc
                    )
                    f = z - h
                if f > 0.0:
                    lo = mid
                else:
                    hi = mid
            tstar = 0.5 * (lo + hi)
            x = ox + tstar * dx
            y = oy + tstar * dy

            col = (x - origin_x) / cell - 0.5
            row = (top - y) / cell - 0.5
            r0 = int(np.floor(row))
            c0 = int(np.floor(col))
            gxs = 0.0
            gys = 0.0
            alb = 1.0
            if 0 <= r0 <= nrows - 2 and 0 <= c0 <= ncols - 2:
                fr = row - r0
                fc = col - c0
                if (
                    gvalid[r0, c0] != 0
                    and gvalid[r0, c0 + 1] != 0
                    and gvalid[r0 + 1, c0] != 0
                    and gvalid[r0 + 1, c0 + 1] != 0
                ):
                    gxs = (
                        gx[r0, c0] * (1 - fr) * (1 - fc)
                        + gx[r0, c0 + 1] * (1 - fr) * fc
                        + gx[r0 + 1, c0] * fr * (1 - fc)
                        + gx[r0 + 1, c0 + 1] * fr * fc
                    )
                    gys = (
                        gy[r0, c0] * (1 - fr) * (1 - fc)
                        + gy[r0, c0 + 1] * (1 - fr) * fc
                        + gy[r0 + 1, c0] * fr * (1 - fc)
                        + gy[r0 + 1, c0 + 1] * fr * fc
                    )
                alb = (
                    albedo[r0, c0] * (1 - fr) * (1 - fc)
                    + albedo[r0, c0 + 1] * (1 - fr) * fc
                    + albedo[r0 + 1, c0] * fr * (1 - fc)
                    + albedo[r0 + 1, c0 + 1] * fr * fc
                )
            norm = 1.0 / np.sqrt(gxs * gxs + gys * gys + 1.0)
            inten = (-gxs * sun[0] - gys * sun[1] + sun[2]) * norm
            if inten < 0.0:
                inten = 0.0
            out[l, s] = inten * alb * RADIANCE_SCALE


_render_numba = njit(cache=True, parallel=True)(_render_impl)


def _render_numpy(values, valid, gx, gy, gvalid, albedo,
                  origin_x, origin_y, cell,
                  origins, dirs, sun, z_lo, z_hi, out):
    nrows, ncols = values.shape
    top = origin_y + nrows * cell
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    n = o.shape[0]
    flat = np.zeros(n)

    vb = valid != 0
    gvb = gvalid != 0

    def bilin(grid, mask, x, y):
        col = (x - origin_x) / cell - 0.5
        row = (top - y) / cell - 0.5
        r0 = np.floor(row).astype(np.int64)
        c0 = np.floor(col).astype(np.int64)
        inside = (r0 >= 0) & (r0 <= nrows - 2) & (c0 >= 0) & (c0 <= ncols - 2)
        r0c = np.clip(r0, 0, nrows - 2)
        c0c = np.clip(c0, 0, ncols - 2)
        ok = inside & mask[r0c, c0c] & mask[r0c, c0c + 1] & mask[r0c + 1, c0c] & mask[r0c + 1, c0c + 1]
        fr = row - r0c
        fc = col - c0c
        h = (
            grid[r0c, c0c] * (1 - fr) * (1 - fc)
            + grid[r0c, c0c + 1] * (1 - fr) * fc
            + grid[r0c + 1, c0c] * fr * (1 - fc)
            + grid[r0c + 1, c0c + 1] * fr * fc
        )
        return h, ok

    dz = d[:, 2]
    down = dz < -1e-12
    safe_dz = np.where(down, dz, -1.0)
    t0 = np.where(down, (z_hi - o[:, 2]) / safe_dz, 0.0)
    t0 = np.maximum(t0, 0.0)
    t1 = np.where(down, (z_lo - o[:, 2]) / safe_dz, -1.0)
    amax = np.maximum(np.maximum(np.abs(d[:, 0]), np.abs(d[:, 1])), np.abs(dz))
    dt = 0.5 * cell / amax

    prev_ok = np.zeros(n, dtype=bool)
    prev_f = np.zeros(n)
    prev_t = t0.copy()
    lo = np.zeros(n)
    hi = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    marching = down.copy()
    k = 0
    while np.any(marching):
        t = t0 + k * dt
        marching &= t <= t1
        act = marching & ~found
        if not np.any(act):
            break
        x = o[:, 0] + t * d[:, 0]
        y = o[:, 1] + t * d[:, 1]
        z = o[:, 2] + t * dz
        h, ok = bilin(values, vb, x, y)
        f = z - h
        cross = act & ok & prev_ok & (prev_f > 0.0) & (f <= 0.0)
        lo = np.where(cross, prev_t, lo)
        hi = np.where(cross, t, hi)
        found |= cross
        upd = act & ok & ~cross
        prev_f = np.where(upd, f, prev_f)
        prev_t = np.where(upd, t, prev_t)
        prev_ok = np.where(act, ok & ~cross, prev_ok)
        k += 1

    if np.any(found):
        idx = np.flatnonzero(found)
        flo = lo[idx]
        fhi = hi[idx]
        for _ in range(40):
            mid = 0.5 * (flo + fhi)
            x = o[idx, 0] + mid * d[idx, 0]
            y = o[idx, 1] + mid * d[idx, 1]
            z = o[idx, 2] + mid * dz[idx]
            h, ok = bilin(values, vb, x, y)
            f = np.where(ok, z - h, 1.0)
            above = f > 0.0
            flo = np.where(above, mid, flo)
            fhi = np.where(above, fhi, mid)
        tstar = 0.5 * (flo + fhi)
        x = o[idx, 0] + tstar * d[idx, 0]
        y = o[idx, 1] + tstar * d[idx, 1]

        gxs, gok = bilin(gx, gvb, x, y)
        gys, _ = bilin(gy, gvb, x, y)
        gxs = np.where(gok, gxs, 0.0)
        gys = np.where(gok, gys, 0.0)
        allv = np.ones((nrows, ncols), dtype=bool)
        alb, aok = bilin(albedo, allv, x, y)
        alb = np.where(aok, alb, 1.0)
        norm = 1.0 / np.sqrt(gxs * gxs + gys * gys + 1.0)
        inten = np.maximum((-gxs * sun[0] - gys * sun[1] + sun[2]) * norm, 0.0)
        flat[idx] = inten * alb * RADIANCE_SCALE

    out[...] = flat.reshape(out.shape)


def render_pushbroom(truth: DemGrid, cam: PushbroomCamera, spec: SceneSpec) -> RasterImage:
    """Render the camera's view of the truth surface; misses map to 0."""
    lines = np.arange(cam.n_lines, dtype=float)
    pos, rot = states_at_lines(cam, lines)
    det = _detector_direction(cam.intrinsics, np.arange(cam.intrinsics.n_samples, dtype=float))
    dirs = np.einsum("lij,sj->lsi", rot, det)
    origins = np.broadcast_to(pos[:, None, :], dirs.shape).copy()

    vals = truth.values
    valid = truth.valid
    if not np.any(valid):
        raise DomainError("truth grid has no valid cells")
    z_lo = float(vals[valid].min()) - 1.0
    z_hi = float(vals[valid].max()) + 1.0
    gx, gy, gvalid = truth.gradient()
    albedo = albedo_texture(truth, spec)
    sun = spec.sun_vector()

    out = np.zeros((cam.n_lines, cam.intrinsics.n_samples))
    kernel = _render_numba if numba_enabled() else _render_numpy
    kernel(
        vals, valid.astype(np.uint8), gx, gy, gvalid.astype(np.uint8), albedo,
        truth.origin_x, truth.origin_y, truth.cell_size,
        origins, dirs, sun, z_lo, z_hi, out,
    )
    return RasterImage(out)


# ---------------------------------------------------------------------------
# stereo fixture
# ---------------------------------------------------------------------------

@dataclass
class StereoFixture:
    img1: RasterImage
    img2: RasterImage
    meta1: AcquisitionMeta
    meta2: AcquisitionMeta
    truth: DemGrid
    cam1: PushbroomCamera
    cam2: PushbroomCamera


def _fixture_camera(side: float, bh: float, altitude: float, base_elev: float,
                    gsd: float, n_lines: int, n_samples: int,
                    detector_pitch: float, start_time: float):
    """One of the two strip cameras; ``side`` is -1 (west) or +1 (east)."""
    orbit_r = MOON_RADIUS_M + altitude
    gamma = math.asin(bh * altitude / (2.0 * orbit_r)) if bh > 0 else 0.0
    half_b = orbit_r * math.sin(gamma)
    drop = orbit_r * math.cos(gamma) - MOON_RADIUS_M  # height above the strip
    cam_x = side * half_b
    cam_z = drop + base_elev

    boresight = np.array([-side * half_b, 0.0, -drop])
    if bh == 0:
        boresight = np.array([0.0, 0.0, -1.0])
    orientation = look_at_orientation(boresight, np.array([0.0, 1.0, 0.0]))

    slant = math.hypot(half_b, drop)
    cos_tilt = drop / slant
    focal = detector_pitch * slant / (gsd * cos_tilt)
    intr = Intrinsics(
        focal_length=focal,
        detector_pitch=detector_pitch,
        principal_sample=(n_samples - 1) / 2.0,
        n_samples=n_samples,
    )

    line_exposure = gsd / GROUND_SPEED_M_S
    strip_len = n_lines * gsd
    y0 = -0.5 * strip_len + 0.5 * gsd  # ground y of line 0
    pad = 2.0 * line_exposure
    t_lo = start_time - pad
    t_hi = start_time + n_lines * line_exposure + pad
    times = np.linspace(t_lo, t_hi, EPHEMERIS_SAMPLES)
    ys = y0 + (times - start_time) / line_exposure * gsd
    positions = np.column_stack([np.full_like(ys, cam_x), ys, np.full_like(ys, cam_z)])
    orientations = np.broadcast_to(orientation, (EPHEMERIS_SAMPLES, 3, 3)).copy()

    cam = PushbroomCamera(
        intrinsics=intr,
        times=times,
        positions=positions,
        orientations=orientations,
        line_exposure=line_exposure,
        n_lines=n_lines,
        start_time=start_time,
    )
    return cam


def _footprint(cam: PushbroomCamera, plane_z: float) -> np.ndarray:
    """Corner-pixel ray intersections with the base plane, in ring order."""
    from .geom import back_project_many

    s_max = cam.intrinsics.n_samples - 1
    l_max = cam.n_lines - 1
    corners = [(0.0, 0.0), (float(s_max), 0.0), (float(s_max), float(l_max)), (0.0, float(l_max))]
    samples = np.array([c[0] for c in corners])
    lines = np.array([c[1] for c in corners])
    origins, dirs = back_project_many(cam, samples, lines)
    t = (plane_z - origins[:, 2]) / dirs[:, 2]
    return origins + t[:, None] * dirs


def make_stereo_fixture(
    spec: SceneSpec,
    bh_target: float,
    gsd: float,
    altitude: float,
    n_lines: int = 512,
    n_samples: int = 512,
    detector_pitch: float = 5e-6,
    terrain_cell: float | None = None,
) -> StereoFixture:
    """Render a stereo pair over the scene with the requested geometry.

    The cameras sit cross-track of the common ground strip with chord
    baseline ``bh_target * altitude``; metadata sidecars carry the camera
    intrinsics so fixtures are self-describing.
    """
    if bh_target < 0:
        raise DomainError("bh_target must be >= 0")
    if gsd <= 0 or altitude <= 0:
        raise DomainError("gsd and altitude must be positive")
    cell = terrain_cell if terrain_cell is not None else gsd / 2.0
    truth = make_terrain(spec, cell)

    cam1 = _fixture_camera(-1.0, bh_target, altitude, spec.base_elevation,
                           gsd, n_lines, n_samples, detector_pitch, 0.0)
    cam2 = _fixture_camera(+1.0, bh_target, altitude, spec.base_elevation,
                           gsd, n_lines, n_samples, detector_pitch, 600.0)

    margin = 2.0 * cell
    metas = []
    for cam, tag in ((cam1, "A"), (cam2, "B")):
        fp = _footprint(cam, spec.base_elevation)
        if (
            fp[:, 0].min() < truth.origin_x + margin
            or fp[:, 0].max() > truth.x_max - margin
            or fp[:, 1].min() < truth.origin_y + margin
            or fp[:, 1].max() > truth.y_max - margin
        ):
            raise ExtentError(
                "camera footprint falls outside the terrain extent; "
                "enlarge SceneSpec.extent"
            )
        metas.append(
            AcquisitionMeta(
                product_id=f"SYN{int(round(bh_target * 1000)):04d}{tag}",
                gsd=gsd,
                altitude=altitude,
                start_time=cam.start_time,
                line_exposure=cam.line_exposure,
                n_lines=n_lines,
                n_samples=n_samples,
                solar_incidence=spec.sun_incidence,
                solar_azimuth=spec.sun_azimuth,
                eph_times=cam.times,
                eph_positions=cam.positions,
                eph_orientations=cam.orientations,
                footprint=fp,
                focal_length=cam.intrinsics.focal_length,
                detector_pitch=cam.intrinsics.detector_pitch,
                principal_sample=cam.intrinsics.principal_sample,
            )
        )

    img1 = render_pushbroom(truth, cam1, spec)
    img2 = render_pushbroom(truth, cam2, spec)
    return StereoFixture(img1, img2, metas[0], metas[1], truth, cam1, cam2)
