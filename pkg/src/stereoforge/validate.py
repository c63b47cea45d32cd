"""Vertical and horizontal agreement metrics between DEMs.

Profiles are bilinear transect samples parameterised by arc length;
horizontal feature offsets come from subpixel NCC registration of hillshade
patches around user-supplied feature locations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .densematch import ncc
from .errors import DomainError, ExtentError, InsufficientDataError
from .ingest import DemGrid, PointCloud, RasterImage
from .mosaic import resample_to_lattice

HILLSHADE_MAX = 65535.0
_DEFAULT_SUN = (315.0, 45.0)  # azimuth, elevation degrees


@dataclass
class Profile:
    """Elevation transect; invalid samples hold NaN."""

    endpoints: tuple[tuple[float, float], tuple[float, float]]
    s: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        if self.s.size == 0 or self.s[0] != 0.0 or np.any(np.diff(self.s) <= 0):
            raise DomainError("arc length must increase strictly from 0")
        if self.s.shape != self.z.shape:
            raise DomainError("s and z must have equal lengths")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.z)


@dataclass(frozen=True)
class ProfileStats:
    rmse: float
    mean_delta: float
    n: int

    def __post_init__(self):
        if self.rmse < 0 or self.n < 1:
            raise DomainError("rmse must be >= 0 and n >= 1")


def extract_profile(dem: DemGrid, a, b, step: float) -> Profile:
    """Bilinear samples every ``step`` metres from a to b."""
    if step <= 0:
        raise DomainError("step must be positive")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lo_x, hi_x = sorted((a[0], b[0]))
    lo_y, hi_y = sorted((a[1], b[1]))
    if lo_x > dem.x_max or hi_x < dem.origin_x or lo_y > dem.y_max or hi_y < dem.origin_y:
        raise ExtentError("profile segment lies outside the DEM extent")
    length = float(np.linalg.norm(b - a))
    n = int(np.floor(length / step + 1e-9)) + 1
    s = np.arange(n) * step
    if length == 0:
        frac = np.zeros(1)
    else:
        frac = s / length
    xy = a[None, :] + frac[:, None] * (b - a)[None, :]
    z, ok = dem.sample_bilinear(xy[:, 0], xy[:, 1])
    return Profile(endpoints=(tuple(a), tuple(b)), s=s, z=np.where(ok, z, np.nan))


def profile_rmse(p1: Profile, p2: Profile) -> ProfileStats:
    """RMSE and mean of the vertical discrepancy over co-valid samples."""
    if p1.s.shape != p2.s.shape or not np.allclose(p1.s, p2.s):
        raise DomainError("profiles must share the same arc-length sampling")
    both = p1.valid & p2.valid
    if not both.any():
        raise InsufficientDataError("profiles have no co-valid samples")
    delta = p1.z[both] - p2.z[both]
    return ProfileStats(
        rmse=float(np.sqrt(np.mean(delta ** 2))),
        mean_delta=float(delta.mean()),
        n=int(both.sum()),
    )


def triangulation_error_stats(cloud: PointCloud) -> tuple[float, float]:
    """Sample mean and population standard deviation of ray miss distance."""
    if len(cloud) == 0:
        raise InsufficientDataError("empty point cloud")
    if cloud.errors is None:
        raise DomainError("cloud carries no triangulation errors")
    return float(cloud.errors.mean()), float(cloud.errors.std(ddof=0))


def hillshade(dem: DemGrid, sun_azimuth_deg: float = _DEFAULT_SUN[0],
              sun_elevation_deg: float = _DEFAULT_SUN[1]) -> RasterImage:
    """Lambertian shaded relief scaled to the 16-bit image range; nodata and
    border cells render as 0."""
    az = np.radians(sun_azimuth_deg)
    el = np.radians(sun_elevation_deg)
    sun = np.array([np.sin(az) * np.cos(el), np.cos(az) * np.cos(el), np.sin(el)])
    gx, gy, gvalid = dem.gradient()
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    inten = (-gx * sun[0] - gy * sun[1] + sun[2]) / norm
    inten = np.clip(inten, 0.0, 1.0)
    inten = np.where(gvalid & dem.valid, inten, 0.0)
    return RasterImage(inten * HILLSHADE_MAX)


def aggregate_to_cell_size(dem: DemGrid, target_cell: float) -> DemGrid:
    """Block-mean aggregation to roughly the target cell size (valid cells
    only; empty blocks become nodata)."""
    factor = max(1, int(round(target_cell / dem.cell_size)))
    if factor == 1:
        return dem.copy()
    n_rows = dem.n_rows // factor
    n_cols = dem.n_cols // factor
    if n_rows < 1 or n_cols < 1:
        raise DomainError("DEM too small for the requested aggregation")
    vals = dem.values[: n_rows * factor, : n_cols * factor]
    ok = dem.valid[: n_rows * factor, : n_cols * factor]
    vals = np.where(ok, vals, 0.0).reshape(n_rows, factor, n_cols, factor)
    okb = ok.reshape(n_rows, factor, n_cols, factor)
    counts = okb.sum(axis=(1, 3))
    sums = vals.sum(axis=(1, 3))
    with np.errstate(invalid="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), dem.nodata)
    # origin shifts so the aggregated grid keeps the same north-west anchor
    origin_y = dem.y_max - n_rows * factor * dem.cell_size
    return DemGrid(dem.origin_x, origin_y, dem.cell_size * factor, mean, dem.nodata)


def _patch(img: np.ndarray, ok: np.ndarray, r: int, c: int, radius: int):
    rows, cols = img.shape
    if not (radius <= r < rows - radius and radius <= c < cols - radius):
        return None
    sl = (slice(r - radius, r + radius + 1), slice(c - radius, c + radius + 1))
    if not ok[sl].all():
        return None
    return img[sl]


def horizontal_offset(
    dem: DemGrid,
    ref: DemGrid,
    features,
    patch_radius: int = 12,
    search_radius: int = 8,
    sun: tuple[float, float] = _DEFAULT_SUN,
):
    """Planimetric offsets (ref position minus dem position, metres) of
    hillshade patches around each feature; features over nodata are skipped.

    Returns (mean_offset (2,), per-feature offsets (n, 2) with NaN rows for
    skipped features).
    """
    ref_r = resample_to_lattice(ref, dem)
    hs_dem = hillshade(dem, *sun).values
    hs_ref = hillshade(ref_r, *sun).values
    ok_dem = dem.valid
    ok_ref = ref_r.valid

    offsets = np.full((len(features), 2), np.nan)
    for k, (x, y) in enumerate(features):
        row, col = dem.frac_index(x, y)
        r = int(round(float(row)))
        c = int(round(float(col)))
        template = _patch(hs_dem, ok_dem, r, c, patch_radius)
        if template is None:
            continue
        corr = np.full((2 * search_radius + 1, 2 * search_radius + 1), -2.0)
        for di in range(-search_radius, search_radius + 1):
            for dj in range(-search_radius, search_radius + 1):
                cand = _patch(hs_ref, ok_ref, r + di, c + dj, patch_radius)
                if cand is None:
                    continue
                value = ncc(template, cand)
                if np.isfinite(value):
                    corr[di + search_radius, dj + search_radius] = value
        i, j = np.unravel_index(np.argmax(corr), corr.shape)
        if corr[i, j] <= -1.5:
            continue
        if i == 0 or j == 0 or i == corr.shape[0] - 1 or j == corr.shape[1] - 1:
            continue
        if min(corr[i - 1, j], corr[i + 1, j], corr[i, j - 1], corr[i, j + 1]) <= -1.5:
            continue
        if corr[i, j] >= 1.0 - 1e-9:
            ddx = ddy = 0.0
        else:
            den_x = corr[i, j - 1] - 2 * corr[i, j] + corr[i, j + 1]
            den_y = corr[i - 1, j] - 2 * corr[i, j] + corr[i + 1, j]
            ddx = float(np.clip(0.5 * (corr[i, j - 1] - corr[i, j + 1]) / den_x, -0.5, 0.5)) if den_x < 0 else 0.0
            ddy = float(np.clip(0.5 * (corr[i - 1, j] - corr[i + 1, j]) / den_y, -0.5, 0.5)) if den_y < 0 else 0.0
        dj_total = (j - search_radius) + ddx
        di_total = (i - search_radius) + ddy
        offsets[k] = (dj_total * dem.cell_size, -di_total * dem.cell_size)

    good = np.isfinite(offsets[:, 0])
    if not good.any():
        raise InsufficientDataError("no feature produced a valid offset")
    return offsets[good].mean(axis=0), offsets
