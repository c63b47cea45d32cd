"""Ray triangulation and point-cloud-to-DEM gridding.

Matched pixels back-project to ray pairs; each surface point is the
midpoint of the shortest segment between the rays, carrying the segment
length as its triangulation error. Gridding is inverse-distance weighting
over a uniform bucket index, with cells lacking support marked nodata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._backend import njit, numba_enabled, prange
from .densematch import DisparityMap
from .errors import DomainError, GeometryError
from .geom import PushbroomCamera, Ray, back_project_many
from .ingest import DEFAULT_NODATA, DemGrid, PointCloud

_PARALLEL_TOL = 1e-12


@dataclass(frozen=True)
class TriangulatedPoint:
    position: np.ndarray
    ray_miss_distance: float

    def __post_init__(self):
        if self.ray_miss_distance < 0:
            raise DomainError("ray miss distance must be >= 0")


@dataclass(frozen=True)
class GriddingParams:
    cell_size: float
    search_radius: Optional[float] = None   # default 2 * cell_size
    idw_power: float = 2.0
    min_samples: int = 1

    def __post_init__(self):
        if self.cell_size <= 0:
            raise DomainError("cell_size must be positive")
        if self.idw_power < 0 or self.min_samples < 1:
            raise DomainError("idw_power must be >= 0 and min_samples >= 1")
        if self.search_radius is not None and self.search_radius < self.cell_size / 2:
            raise DomainError("search_radius must be >= cell_size / 2")

    @property
    def radius(self) -> float:
        return self.search_radius if self.search_radius is not None else 2.0 * self.cell_size


def _closest_ray_params(o1, d1, o2, d2):
    b = float(np.dot(d1, d2))
    if abs(b) >= 1.0 - _PARALLEL_TOL:
        raise GeometryError("viewing rays are (near-)parallel")
    w0 = o1 - o2
    d = float(np.dot(d1, w0))
    e = float(np.dot(d2, w0))
    denom = 1.0 - b * b
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    # clamp to the forward half-rays, re-solving the free parameter
    if s < 0.0:
        s = 0.0
        t = max(0.0, float(np.dot(d2, o1 + s * d1 - o2)))
    elif t < 0.0:
        t = 0.0
        s = max(0.0, float(np.dot(d1, o2 + t * d2 - o1)))
    return s, t


def triangulate(r1: Ray, r2: Ray) -> TriangulatedPoint:
    """Midpoint of the common perpendicular between two viewing rays."""
    o1 = np.asarray(r1.origin, dtype=float)
    d1 = np.asarray(r1.direction, dtype=float)
    o2 = np.asarray(r2.origin, dtype=float)
    d2 = np.asarray(r2.direction, dtype=float)
    s, t = _closest_ray_params(o1, d1, o2, d2)
    p1 = o1 + s * d1
    p2 = o2 + t * d2
    return TriangulatedPoint(0.5 * (p1 + p2), float(np.linalg.norm(p1 - p2)))


def triangulate_many(o1, d1, o2, d2):
    """Vectorized triangulation; near-parallel pairs yield inf miss distance."""
    b = np.einsum("ij,ij->i", d1, d2)
    w0 = o1 - o2
    d = np.einsum("ij,ij->i", d1, w0)
    e = np.einsum("ij,ij->i", d2, w0)
    denom = 1.0 - b * b
    degen = np.abs(b) >= 1.0 - _PARALLEL_TOL
    denom_safe = np.where(degen, 1.0, denom)
    s = (b * e - d) / denom_safe
    t = (e - b * d) / denom_safe
    s_neg = s < 0
    s = np.where(s_neg, 0.0, s)
    t = np.where(s_neg, np.maximum(0.0, np.einsum("ij,ij->i", d2, o1 + s[:, None] * d1 - o2)), t)
    t_neg = (t < 0) & ~s_neg
    t = np.where(t_neg, 0.0, t)
    s = np.where(t_neg, np.maximum(0.0, np.einsum("ij,ij->i", d1, o2 + t[:, None] * d2 - o1)), s)
    p1 = o1 + s[:, None] * d1
    p2 = o2 + t[:, None] * d2
    pos = 0.5 * (p1 + p2)
    miss = np.where(degen, np.inf, np.linalg.norm(p1 - p2, axis=1))
    return pos, miss


def cloud_from_disparity(
    disp: DisparityMap,
    cam1: PushbroomCamera,
    cam2: PushbroomCamera,
    max_miss: float = 5.0,
) -> PointCloud:
    """Triangulate every valid disparity pixel; blunders past the miss
    threshold are discarded rather than reported."""
    ii, jj = np.nonzero(disp.valid)
    if ii.size == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros(0))
    s1 = disp.origin_col + jj.astype(float)
    l1 = disp.origin_row + ii.astype(float)
    s2 = s1 + disp.dx[ii, jj]
    l2 = l1 + disp.dy[ii, jj]
    inb = (
        (s2 >= 0) & (s2 <= cam2.intrinsics.n_samples - 1)
        & (l2 >= 0) & (l2 <= cam2.n_lines - 1)
    )
    if not inb.any():
        return PointCloud(np.zeros((0, 3)), np.zeros(0))
    o1, dir1 = back_project_many(cam1, s1[inb], l1[inb])
    o2, dir2 = back_project_many(cam2, s2[inb], l2[inb])
    pos, miss = triangulate_many(o1, dir1, o2, dir2)
    keep = np.isfinite(miss) & (miss <= max_miss)
    return PointCloud(pos[keep], miss[keep])


# ---------------------------------------------------------------------------
# gridding
# ---------------------------------------------------------------------------

def extent_of(cloud: PointCloud, cell_size: float, pad: float = 0.0):
    """Bounding extent (x_min, y_min, x_max, y_max) snapped to whole cells."""
    if len(cloud) == 0:
        raise DomainError("cannot derive an extent from an empty cloud")
    x_min = float(cloud.points[:, 0].min()) - pad
    y_min = float(cloud.points[:, 1].min()) - pad
    x_max = float(cloud.points[:, 0].max()) + pad
    y_max = float(cloud.points[:, 1].max()) + pad
    n_cols = max(1, int(math.ceil((x_max - x_min) / cell_size)))
    n_rows = max(1, int(math.ceil((y_max - y_min) / cell_size)))
    return x_min, y_min, x_min + n_cols * cell_size, y_min + n_rows * cell_size


def _grid_kernel_impl(px, py, pz, order, starts, nbx, nby, bx0, by0, pitch,
                      origin_x, origin_y, cell, radius, eps, power,
                      min_samples, nodata, out):
    n_rows, n_cols = out.shape
    top = origin_y + n_rows * cell
    for r in prange(n_rows):
        cy = top - (r + 0.5) * cell
        for c in range(n_cols):
            cx = origin_x + (c + 0.5) * cell
            cbi = int(np.floor((cx - bx0) / pitch))
            cbj = int(np.floor((cy - by0) / pitch))
            wsum = 0.0
            wzsum = 0.0
            count = 0
            for bi in range(cbi - 1, cbi + 2):
                if bi < 0 or bi >= nbx:
                    continue
                for bj in range(cbj - 1, cbj + 2):
                    if bj < 0 or bj >= nby:
                        continue
                    bucket = bi * nby + bj
                    for k in range(starts[bucket], starts[bucket + 1]):
                        p = order[k]
                        dx = px[p] - cx
                        dy = py[p] - cy
                        dist = np.sqrt(dx * dx + dy * dy)
                        if dist <= radius:
                            w = 1.0 / (dist + eps) ** power
                            wsum += w
                            wzsum += w * pz[p]
                            count += 1
            if count >= min_samples:
                out[r, c] = wzsum / wsum
            else:
                out[r, c] = nodata


_grid_kernel_numba = njit(cache=True, parallel=True)(_grid_kernel_impl)


def _grid_numpy(px, py, pz, origin_x, origin_y, cell, n_rows, n_cols,
                radius, eps, power, min_samples, nodata):
    top = origin_y + n_rows * cell
    wsum = np.zeros((n_rows, n_cols))
    wzsum = np.zeros((n_rows, n_cols))
    count = np.zeros((n_rows, n_cols), dtype=np.int64)
    c0 = np.floor((px - origin_x) / cell).astype(np.int64)
    r0 = np.floor((top - py) / cell).astype(np.int64)
    reach = int(math.ceil(radius / cell + 0.5))
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            r = r0 + di
            c = c0 + dj
            inb = (r >= 0) & (r < n_rows) & (c >= 0) & (c < n_cols)
            if not inb.any():
                continue
            cx = origin_x + (c + 0.5) * cell
            cy = top - (r + 0.5) * cell
            dist = np.sqrt((px - cx) ** 2 + (py - cy) ** 2)
            m = inb & (dist <= radius)
            if not m.any():
                continue
            w = 1.0 / (dist[m] + eps) ** power
            np.add.at(wsum, (r[m], c[m]), w)
            np.add.at(wzsum, (r[m], c[m]), w * pz[m])
            np.add.at(count, (r[m], c[m]), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(count >= min_samples, wzsum / wsum, nodata)
    return out


def grid_dem(cloud: PointCloud, params: GriddingParams, extent,
             nodata: float = DEFAULT_NODATA) -> DemGrid:
    """IDW-grid the cloud onto the extent; unsupported cells become nodata."""
    if len(cloud) == 0:
        raise DomainError("cannot grid an empty cloud")
    x_min, y_min, x_max, y_max = extent
    cell = params.cell_size
    n_cols = max(1, int(round((x_max - x_min) / cell)))
    n_rows = max(1, int(round((y_max - y_min) / cell)))
    radius = params.radius
    eps = cell / 100.0
    power = float(params.idw_power)

    px = cloud.points[:, 0]
    py = cloud.points[:, 1]
    pz = cloud.points[:, 2]
    near = (
        (px >= x_min - radius) & (px <= x_max + radius)
        & (py >= y_min - radius) & (py <= y_max + radius)
    )
    px, py, pz = px[near], py[near], pz[near]

    if numba_enabled():
        out = np.empty((n_rows, n_cols))
        pitch = radius
        bx0 = x_min - 2.0 * pitch
        by0 = y_min - 2.0 * pitch
        nbx = int(math.ceil((x_max + 2.0 * pitch - bx0) / pitch)) + 1
        nby = int(math.ceil((y_max + 2.0 * pitch - by0) / pitch)) + 1
        if px.size:
            bi = np.floor((px - bx0) / pitch).astype(np.int64)
            bj = np.floor((py - by0) / pitch).astype(np.int64)
            ids = bi * nby + bj
            order = np.argsort(ids, kind="stable")
            sorted_ids = ids[order]
            starts = np.searchsorted(sorted_ids, np.arange(nbx * nby + 1))
        else:
            order = np.zeros(0, dtype=np.int64)
            starts = np.zeros(nbx * nby + 1, dtype=np.int64)
        _grid_kernel_numba(px, py, pz, order, starts, nbx, nby, bx0, by0, pitch,
                           x_min, y_min, cell, radius, eps, power,
                           params.min_samples, nodata, out)
    else:
        out = _grid_numpy(px, py, pz, x_min, y_min, cell, n_rows, n_cols,
                          radius, eps, power, params.min_samples, nodata)
    return DemGrid(x_min, y_min, cell, out, nodata)
