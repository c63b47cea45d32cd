"""Void filling from a reference DEM and priority feathering.

The reference is resampled onto the primary lattice with nodata-aware
bilinear weights, holes are filled by a per-cell case split, and seam
blending uses a linear alpha ramp over a two-pass 3-4 chamfer distance to
the footprint exterior (cells beyond the grid border count as exterior).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import njit, numba_enabled
from .errors import DomainError, ExtentError
from .ingest import DemGrid

_INF = np.int64(1) << 40


@dataclass
class WeightField:
    """Per-cell blending weight on the primary DEM's lattice."""

    alpha: np.ndarray
    origin_x: float
    origin_y: float
    cell_size: float

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if np.any(self.alpha < 0) or np.any(self.alpha > 1):
            raise DomainError("alpha must lie in [0, 1]")


def resample_to_lattice(src: DemGrid, like: DemGrid) -> DemGrid:
    """Bilinear resample of ``src`` onto ``like``'s lattice.

    A target cell is nodata when any of the four contributing source cells
    is nodata, so the sentinel never bleeds into elevations.
    """
    if src.same_lattice(like):
        return DemGrid(like.origin_x, like.origin_y, like.cell_size,
                       src.values.copy(), src.nodata)
    rows = np.arange(like.n_rows)
    cols = np.arange(like.n_cols)
    xm, ym = np.meshgrid(like.cell_center_x(cols), like.cell_center_y(rows))
    z, ok = src.sample_bilinear(xm.ravel(), ym.ravel())
    values = np.where(ok, z, src.nodata).reshape(like.n_rows, like.n_cols)
    return DemGrid(like.origin_x, like.origin_y, like.cell_size, values, src.nodata)


def _check_overlap(primary: DemGrid, ref: DemGrid):
    if (
        ref.origin_x >= primary.x_max
        or ref.x_max <= primary.origin_x
        or ref.origin_y >= primary.y_max
        or ref.y_max <= primary.origin_y
    ):
        raise ExtentError("primary and reference extents do not overlap")


def fill_holes(primary: DemGrid, ref: DemGrid) -> DemGrid:
    """Primary where valid, resampled reference otherwise."""
    _check_overlap(primary, ref)
    ref_r = resample_to_lattice(ref, primary)
    ref_vals = np.where(ref_r.valid, ref_r.values, primary.nodata)
    values = np.where(primary.valid, primary.values, ref_vals)
    return DemGrid(primary.origin_x, primary.origin_y, primary.cell_size,
                   values, primary.nodata)


# ---------------------------------------------------------------------------
# chamfer distance to the footprint exterior
# ---------------------------------------------------------------------------

def _chamfer_impl(d):
    rows, cols = d.shape
    for r in range(1, rows):
        for c in range(cols):
            best = d[r, c]
            if d[r - 1, c] + 3 < best:
                best = d[r - 1, c] + 3
            if c > 0 and d[r - 1, c - 1] + 4 < best:
                best = d[r - 1, c - 1] + 4
            if c + 1 < cols and d[r - 1, c + 1] + 4 < best:
                best = d[r - 1, c + 1] + 4
            if c > 0 and d[r, c - 1] + 3 < best:
                best = d[r, c - 1] + 3
            d[r, c] = best
    for r in range(rows - 2, -1, -1):
        for c in range(cols - 1, -1, -1):
            best = d[r, c]
            if d[r + 1, c] + 3 < best:
                best = d[r + 1, c] + 3
            if c + 1 < cols and d[r + 1, c + 1] + 4 < best:
                best = d[r + 1, c + 1] + 4
            if c > 0 and d[r + 1, c - 1] + 4 < best:
                best = d[r + 1, c - 1] + 4
            if c + 1 < cols and d[r, c + 1] + 3 < best:
                best = d[r, c + 1] + 3
            d[r, c] = best


_chamfer_numba = njit(cache=True)(_chamfer_impl)


def _chamfer_numpy(d):
    rows, cols = d.shape
    j = 3 * np.arange(cols, dtype=np.int64)
    for r in range(1, rows):
        prev = d[r - 1]
        cand = np.minimum(d[r], prev + 3)
        shift_r = np.empty_like(prev)
        shift_r[0] = _INF
        shift_r[1:] = prev[:-1]
        cand = np.minimum(cand, shift_r + 4)
        shift_l = np.empty_like(prev)
        shift_l[-1] = _INF
        shift_l[:-1] = prev[1:]
        cand = np.minimum(cand, shift_l + 4)
        # in-row left-to-right propagation via min-plus prefix
        d[r] = j + np.minimum.accumulate(cand - j)
    for r in range(rows - 2, -1, -1):
        nxt = d[r + 1]
        cand = np.minimum(d[r], nxt + 3)
        shift_r = np.empty_like(nxt)
        shift_r[0] = _INF
        shift_r[1:] = nxt[:-1]
        cand = np.minimum(cand, shift_r + 4)
        shift_l = np.empty_like(nxt)
        shift_l[-1] = _INF
        shift_l[:-1] = nxt[1:]
        cand = np.minimum(cand, shift_l + 4)
        rev = cand[::-1] - j
        d[r] = (j + np.minimum.accumulate(rev))[::-1]


def chamfer_distance(mask: np.ndarray) -> np.ndarray:
    """3-4 chamfer distance (in cell units) of interior cells to the
    exterior; cells beyond the grid border count as exterior."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=np.int64)
    padded[1:-1, 1:-1] = np.where(mask, _INF, 0)
    if numba_enabled():
        _chamfer_numba(padded)
    else:
        _chamfer_numpy(padded)
    return padded[1:-1, 1:-1].astype(float) / 3.0


def compute_alpha(primary: DemGrid, blend_len: float = 14.0) -> WeightField:
    """Linear ramp from 0 at the footprint exterior to 1 ``blend_len`` cells
    inside; blend_len 0 degenerates to the binary validity mask."""
    if blend_len < 0:
        raise DomainError("blend_len must be >= 0")
    mask = primary.valid
    if blend_len == 0:
        alpha = mask.astype(float)
    else:
        dist = chamfer_distance(mask)
        alpha = np.clip(dist / float(blend_len), 0.0, 1.0)
    return WeightField(alpha, primary.origin_x, primary.origin_y, primary.cell_size)


def blend(primary: DemGrid, ref: DemGrid, alpha: WeightField) -> DemGrid:
    """Convex per-cell combination honouring nodata on either side."""
    if not primary.same_lattice(ref):
        raise ExtentError("blend inputs must share a cell lattice")
    if alpha.alpha.shape != primary.values.shape:
        raise ExtentError("alpha field does not match the primary lattice")
    a = np.where(primary.valid, alpha.alpha, 0.0)
    a = np.where(ref.valid, a, 1.0)
    out = np.where(
        primary.valid | ref.valid,
        a * np.where(primary.valid, primary.values, 0.0)
        + (1.0 - a) * np.where(ref.valid, ref.values, 0.0),
        primary.nodata,
    )
    return DemGrid(primary.origin_x, primary.origin_y, primary.cell_size,
                   out, primary.nodata)
