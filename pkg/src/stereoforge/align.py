"""Rigid co-registration to a reference terrain and residual bias removal.

ICP correspondences project each point vertically onto the bilinear
reference surface with normals from central differences; each iteration
solves the linearized point-to-plane system for an incremental rotation and
translation, backtracking the step whenever the fresh-correspondence RMS
would rise. After alignment a constant vertical offset is estimated along
transects (or every co-valid cell) and subtracted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, GeometryError, InsufficientDataError
from .geom import RigidTransform, orthonormalize, skew
from .ingest import DemGrid, PointCloud, _fmt

_MIN_CORRESPONDENCES = 100
_MAX_BACKTRACKS = 10


@dataclass
class IcpResult:
    transform: RigidTransform
    final_rms: float
    iterations: int
    converged: bool
    rms_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.final_rms < 0:
            raise DomainError("final_rms must be >= 0")


@dataclass(frozen=True)
class BiasCorrection:
    delta_z: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise DomainError("bias estimate needs at least one sample")


def _sample_surface(ref: DemGrid, grads, pts: np.ndarray):
    """Reference height and unit normal under each point; validity mask."""
    gx, gy, gvalid = grads
    z, zok = ref.sample_bilinear(pts[:, 0], pts[:, 1])
    gxg = DemGrid(ref.origin_x, ref.origin_y, ref.cell_size, gx, nodata=np.inf)
    gyg = DemGrid(ref.origin_x, ref.origin_y, ref.cell_size, gy, nodata=np.inf)
    sx, _ = gxg.sample_bilinear(pts[:, 0], pts[:, 1])
    sy, _ = gyg.sample_bilinear(pts[:, 0], pts[:, 1])
    gv = DemGrid(ref.origin_x, ref.origin_y, ref.cell_size,
                 gvalid.astype(float), nodata=np.inf)
    gok, _ = gv.sample_bilinear(pts[:, 0], pts[:, 1])
    ok = zok & (gok >= 1.0 - 1e-12)
    sx = np.where(ok, sx, 0.0)
    sy = np.where(ok, sy, 0.0)
    norm = np.sqrt(sx * sx + sy * sy + 1.0)
    normals = np.column_stack([-sx, -sy, np.ones_like(sx)]) / norm[:, None]
    return z, normals, ok


def _point_to_plane_rms(ref: DemGrid, grads, pts: np.ndarray):
    z, normals, ok = _sample_surface(ref, grads, pts)
    if not ok.any():
        return np.inf, 0
    r = normals[ok, 2] * (pts[ok, 2] - z[ok])
    return float(np.sqrt(np.mean(r * r))), int(ok.sum())


def icp_align(cloud: PointCloud, ref: DemGrid,
              max_iter: int = 50, tol: float = 1e-4) -> IcpResult:
    """Point-to-surface ICP; the result maps original cloud points into the
    reference frame."""
    if max_iter < 1 or tol <= 0:
        raise DomainError("max_iter must be >= 1 and tol > 0")
    if not ref.valid.any():
        raise GeometryError("reference grid is entirely nodata")
    grads = ref.gradient()
    if not grads[2].any():
        raise GeometryError("reference grid supports no normal estimation")

    points = cloud.points
    transform = RigidTransform.identity()
    rms, n_corr = _point_to_plane_rms(ref, grads, points)
    if n_corr < _MIN_CORRESPONDENCES:
        raise InsufficientDataError(
            f"only {n_corr} usable ICP correspondences (need {_MIN_CORRESPONDENCES})"
        )
    trace = [rms]
    converged = False
    iterations = 0

    for _ in range(max_iter):
        iterations += 1
        p = transform.apply(points)
        z, normals, ok = _sample_surface(ref, grads, p)
        if int(ok.sum()) < _MIN_CORRESPONDENCES:
            raise InsufficientDataError(
                f"only {int(ok.sum())} usable ICP correspondences "
                f"(need {_MIN_CORRESPONDENCES})"
            )
        pk = p[ok]
        nk = normals[ok]
        r = nk[:, 2] * (pk[:, 2] - z[ok])
        a = np.hstack([np.cross(pk, nk), nk])
        sol, _, _, _ = np.linalg.lstsq(a, -r, rcond=None)

        alpha = 1.0
        accepted = False
        for _ in range(_MAX_BACKTRACKS):
            omega = alpha * sol[:3]
            t_inc = alpha * sol[3:]
            r_inc = orthonormalize(np.eye(3) + skew(omega))
            candidate = RigidTransform(r_inc, t_inc).compose(transform)
            rms_new, n_new = _point_to_plane_rms(ref, grads, candidate.apply(points))
            if n_new >= _MIN_CORRESPONDENCES and rms_new <= rms:
                transform = candidate
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        delta = rms - rms_new
        rms = rms_new
        trace.append(rms)
        if delta < tol:
            converged = True
            break

    return IcpResult(
        transform=transform,
        final_rms=rms,
        iterations=iterations,
        converged=converged,
        rms_trace=trace,
    )


# ---------------------------------------------------------------------------
# constant vertical bias
# ---------------------------------------------------------------------------

def _transect_positions(profile, dem: DemGrid):
    a = np.asarray(profile.endpoints[0], dtype=float)
    b = np.asarray(profile.endpoints[1], dtype=float)
    length = np.linalg.norm(b - a)
    if length == 0:
        frac = np.zeros_like(profile.s)
    else:
        frac = profile.s / length
    xy = a[None, :] + frac[:, None] * (b - a)[None, :]
    return xy[:, 0], xy[:, 1]


def estimate_bias(dem: DemGrid, ref: DemGrid, transects=None) -> BiasCorrection:
    """Mean vertical offset dem - ref over transect samples.

    With no transects supplied, every co-valid cell of the grids acts as a
    sample, which supersets any manual transect choice.
    """
    deltas = []
    if transects:
        for profile in transects:
            x, y = _transect_positions(profile, dem)
            zd, okd = dem.sample_bilinear(x, y)
            zr, okr = ref.sample_bilinear(x, y)
            both = okd & okr
            deltas.append(zd[both] - zr[both])
    else:
        rows, cols = np.nonzero(dem.valid)
        if rows.size:
            x = dem.cell_center_x(cols)
            y = dem.cell_center_y(rows)
            zr, okr = ref.sample_bilinear(x, y)
            deltas.append(dem.values[rows, cols][okr] - zr[okr])
    if deltas:
        all_d = np.concatenate(deltas)
    else:
        all_d = np.zeros(0)
    if all_d.size == 0:
        raise InsufficientDataError("no co-valid samples for bias estimation")
    return BiasCorrection(delta_z=float(all_d.mean()), n_samples=int(all_d.size))


def apply_bias(dem: DemGrid, corr: BiasCorrection) -> DemGrid:
    """Subtract the constant offset from valid cells; nodata untouched."""
    values = np.where(dem.valid, dem.values - corr.delta_z, dem.values)
    return DemGrid(dem.origin_x, dem.origin_y, dem.cell_size, values, dem.nodata)


def transform_cloud(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    return PointCloud(transform.apply(cloud.points), cloud.errors)


# ---------------------------------------------------------------------------
# transform file (row-major R then T, 12 numbers)
# ---------------------------------------------------------------------------

def write_transform(transform: RigidTransform, path) -> None:
    lines = []
    for row in transform.rotation:
        lines.append(" ".join(_fmt(v) for v in row))
    lines.append(" ".join(_fmt(v) for v in transform.translation))
    Path(path).write_text("\n".join(lines) + "\n")


def read_transform(path) -> RigidTransform:
    tokens = Path(path).read_text().split()
    if len(tokens) != 12:
        raise FormatError(f"{path}: transform file needs exactly 12 numbers")
    try:
        vals = np.array([float(t) for t in tokens])
    except ValueError:
        raise FormatError(f"{path}: non-numeric transform value") from None
    return RigidTransform(vals[:9].reshape(3, 3), vals[9:])
