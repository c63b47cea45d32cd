"""Sparse tie-point matching and robust bundle adjustment.

Interest points are local variance maxima on a coarse tile grid, matched by
NCC around a flat-surface seed and triangulated for their initial world
positions. Bundle adjustment then refines one constant pointing (axis-angle)
and position offset per camera jointly with the tie-point positions, using a
Cauchy-robustified reprojection cost, a ground anchor on the initial
triangulations, a camera position prior, and a Levenberg-Marquardt loop with
central-difference Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, GeometryError, InsufficientDataError, ParseError
from .geom import (
    ImagePoint,
    PushbroomCamera,
    back_project_many,
    project_many,
    rotation_from_axis_angle,
)
from .ingest import RasterImage, _fmt

_TEMPLATE_RADIUS = 10
_SEARCH_RADIUS = 12
_MIN_TIE_NCC = 0.7
_MIN_TIES = 6
_FAILED_RESIDUAL = 1e3   # px, for points a trial step pushes off-image
_FD_STEP = 1e-4          # natural units: radians / metres


@dataclass
class TiePoint:
    obs1: ImagePoint
    obs2: ImagePoint
    world: np.ndarray

    def __post_init__(self):
        self.world = np.asarray(self.world, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.world)):
            raise DomainError("tie point world position must be finite")


@dataclass(frozen=True)
class CameraAdjustment:
    rotation_delta: np.ndarray   # axis-angle, radians
    position_delta: np.ndarray   # metres

    def __post_init__(self):
        rot = np.asarray(self.rotation_delta, dtype=float).reshape(3)
        pos = np.asarray(self.position_delta, dtype=float).reshape(3)
        if np.linalg.norm(rot) >= np.pi:
            raise DomainError("rotation delta must stay below pi radians")
        object.__setattr__(self, "rotation_delta", rot)
        object.__setattr__(self, "position_delta", pos)

    @staticmethod
    def zero() -> "CameraAdjustment":
        return CameraAdjustment(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class RobustLossParams:
    cauchy_scale_c: float = 2.0          # px
    max_iterations: int = 100
    ground_constraint_weight: float = 1.0
    position_sigma: float = 50.0         # metres

    def __post_init__(self):
        if self.cauchy_scale_c <= 0:
            raise DomainError("cauchy_scale_c must be positive")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")
        if self.ground_constraint_weight < 0 or self.position_sigma <= 0:
            raise DomainError("weights must be >= 0 and position_sigma > 0")


def cauchy_loss(s, c: float):
    """Robust loss c^2 log(1 + s/c^2) of a squared residual."""
    if c <= 0:
        raise DomainError("scale must be positive")
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise DomainError("squared residual must be >= 0")
    return c * c * np.log1p(s / (c * c))


def cauchy_weight(s, c: float):
    """d rho / d s = 1 / (1 + s/c^2)."""
    s = np.asarray(s, dtype=float)
    return 1.0 / (1.0 + s / (c * c))


def apply_adjustment(cam: PushbroomCamera, adj: CameraAdjustment) -> PushbroomCamera:
    """Constant pointing and position correction applied to the ephemeris."""
    rot = rotation_from_axis_angle(adj.rotation_delta)
    return PushbroomCamera(
        intrinsics=cam.intrinsics,
        times=cam.times.copy(),
        positions=cam.positions + adj.position_delta,
        orientations=np.einsum("ij,njk->nik", rot, cam.orientations),
        line_exposure=cam.line_exposure,
        n_lines=cam.n_lines,
        start_time=cam.start_time,
    )


# ---------------------------------------------------------------------------
# tie point detection
# ---------------------------------------------------------------------------

def _box_sums(img: np.ndarray, radius: int):
    s = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    s[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)

    def box(values_integral, r, c):
        return (values_integral[r + radius + 1, c + radius + 1]
                - values_integral[r - radius, c + radius + 1]
                - values_integral[r + radius + 1, c - radius]
                + values_integral[r - radius, c - radius])

    return s, box


def _variance_map(img: np.ndarray, radius: int) -> np.ndarray:
    """Window variance at every interior pixel; borders are -inf."""
    rows, cols = img.shape
    area = (2 * radius + 1) ** 2
    s1, _ = _box_sums(img, radius)
    s2, _ = _box_sums(img * img, radius)
    out = np.full((rows, cols), -np.inf)
    r = np.arange(radius, rows - radius)
    c = np.arange(radius, cols - radius)
    if r.size == 0 or c.size == 0:
        return out
    def window(integral):
        return (integral[r + radius + 1][:, c + radius + 1]
                - integral[r - radius][:, c + radius + 1]
                - integral[r + radius + 1][:, c - radius]
                + integral[r - radius][:, c - radius])
    w1 = window(s1)
    w2 = window(s2)
    out[np.ix_(r, c)] = np.maximum(0.0, w2 / area - (w1 / area) ** 2)
    return out


def _flat_prior_seeds(cam1, cam2, cols, rows, prior_elevation):
    """Map candidate pixels into the second image via a constant-height plane."""
    origins, dirs = back_project_many(cam1, cols, rows)
    down = dirs[:, 2] < -1e-12
    t = np.where(down, (prior_elevation - origins[:, 2]) / np.where(down, dirs[:, 2], -1.0), np.nan)
    ground = origins + t[:, None] * dirs
    s2, l2, status = project_many(cam2, ground)
    ok = down & (status == 0)
    return s2, l2, ok


def _refine_peak(corr: np.ndarray, i: int, j: int):
    """3-point parabola refinement with the exact-peak guard."""
    c0 = corr[i, j]
    if c0 >= 1.0 - 1e-9:
        return 0.0, 0.0
    def axis_delta(cm, cp):
        den = cm - 2.0 * c0 + cp
        if den >= 0:
            return 0.0
        return float(np.clip(0.5 * (cm - cp) / den, -0.5, 0.5))
    dx = axis_delta(corr[i, j - 1], corr[i, j + 1])
    dy = axis_delta(corr[i - 1, j], corr[i + 1, j])
    return dx, dy


def detect_tie_points(
    img1: RasterImage,
    img2: RasterImage,
    cam1: PushbroomCamera,
    cam2: PushbroomCamera,
    max_points: int = 64,
    prior_elevation: float = 0.0,
    min_ncc: float = _MIN_TIE_NCC,
) -> list[TiePoint]:
    """Detect, match and triangulate sparse tie points.

    Raises InsufficientDataError when fewer than 6 matches survive.
    """
    left = img1.values
    right = img2.values
    rows, cols = left.shape
    tw = _TEMPLATE_RADIUS
    sr = _SEARCH_RADIUS
    margin = tw + 2

    variance = _variance_map(left, tw)
    n_tiles = int(np.ceil(np.sqrt(2.0 * max_points)))
    tile_r = max(1, rows // n_tiles)
    tile_c = max(1, cols // n_tiles)
    candidates = []
    for tr in range(n_tiles):
        for tc in range(n_tiles):
            r0 = max(margin, tr * tile_r)
            r1 = min(rows - margin, (tr + 1) * tile_r)
            c0 = max(margin, tc * tile_c)
            c1 = min(cols - margin, (tc + 1) * tile_c)
            if r0 >= r1 or c0 >= c1:
                continue
            block = variance[r0:r1, c0:c1]
            idx = np.argmax(block)
            br, bc = np.unravel_index(idx, block.shape)
            v = block[br, bc]
            if np.isfinite(v) and v > 0:
                candidates.append((float(v), r0 + br, c0 + bc))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    candidates = candidates[:max_points]
    if not candidates:
        raise InsufficientDataError("no textured interest points found")

    cand_rows = np.array([c[1] for c in candidates], dtype=float)
    cand_cols = np.array([c[2] for c in candidates], dtype=float)
    s2_seed, l2_seed, seed_ok = _flat_prior_seeds(
        cam1, cam2, cand_cols, cand_rows, prior_elevation
    )

    area = (2 * tw + 1) ** 2
    ties: list[TiePoint] = []
    for k in range(len(candidates)):
        if not seed_ok[k]:
            continue
        r, c = int(cand_rows[k]), int(cand_cols[k])
        sc = int(round(s2_seed[k]))
        lc = int(round(l2_seed[k]))
        if not (sr + tw <= sc < cols - sr - tw and sr + tw <= lc < rows - sr - tw):
            continue
        template = left[r - tw:r + tw + 1, c - tw:c + tw + 1]
        t0 = template - template.mean()
        t_norm = float((t0 * t0).sum())
        if t_norm <= 1e-9 * area * max(1.0, template.mean() ** 2):
            continue
        region = right[lc - sr - tw:lc + sr + tw + 1, sc - sr - tw:sc + sr + tw + 1]
        win = np.lib.stride_tricks.sliding_window_view(region, (2 * tw + 1, 2 * tw + 1))
        sums = win.sum(axis=(2, 3))
        sqs = (win * win).sum(axis=(2, 3))
        cross = np.einsum("ijkl,kl->ij", win, t0)
        nvar = np.maximum(0.0, sqs - sums * sums / area)
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = cross / np.sqrt(nvar * t_norm)
        corr = np.where(nvar > 1e-9 * area * np.maximum(1.0, (sums / area) ** 2),
                        np.clip(corr, -1.0, 1.0), -2.0)
        i, j = np.unravel_index(np.argmax(corr), corr.shape)
        if corr[i, j] < min_ncc:
            continue
        if i == 0 or j == 0 or i == corr.shape[0] - 1 or j == corr.shape[1] - 1:
            continue
        ddx, ddy = _refine_peak(corr, i, j)
        s2 = sc + (j - sr) + ddx
        l2 = lc + (i - sr) + ddy
        obs1 = ImagePoint(float(c), float(r))
        obs2 = ImagePoint(float(s2), float(l2))

        o1, d1 = back_project_many(cam1, [obs1.sample], [obs1.line])
        o2, d2 = back_project_many(cam2, [obs2.sample], [obs2.line])
        from .recon import triangulate_many

        pos, miss = triangulate_many(o1, d1, o2, d2)
        if np.isfinite(miss[0]):
            world = pos[0]
        else:
            # coincident cameras: fall back to the flat-prior intersection
            t = (prior_elevation - o1[0, 2]) / d1[0, 2]
            world = o1[0] + t * d1[0]
        ties.append(TiePoint(obs1, obs2, world))

    if len(ties) < _MIN_TIES:
        raise InsufficientDataError(
            f"only {len(ties)} tie points matched (need {_MIN_TIES})"
        )
    return ties


# ---------------------------------------------------------------------------
# bundle adjustment
# ---------------------------------------------------------------------------

@dataclass
class BundleResult:
    adjustments: tuple[CameraAdjustment, CameraAdjustment]
    world: np.ndarray
    final_cost: float
    iterations: int
    hit_iteration_cap: bool
    cost_trace: list[float] = field(default_factory=list)
    gradient_inf_norm: float = float("nan")


def reprojection_rms(cam1: PushbroomCamera, cam2: PushbroomCamera,
                     ties: list[TiePoint], world: np.ndarray | None = None) -> float:
    """Unweighted RMS reprojection error over all observations, in pixels."""
    x = world if world is not None else np.array([t.world for t in ties])
    total = 0.0
    count = 0
    for cam, obs in (
        (cam1, np.array([[t.obs1.sample, t.obs1.line] for t in ties])),
        (cam2, np.array([[t.obs2.sample, t.obs2.line] for t in ties])),
    ):
        s, l, status = project_many(cam, x)
        good = status == 0
        diff = np.column_stack([s, l])[good] - obs[good]
        total += float((diff ** 2).sum())
        count += int(good.sum())
    if count == 0:
        return float("inf")
    return float(np.sqrt(total / count))


def residual_function(cam1: PushbroomCamera, cam2: PushbroomCamera,
                      ties: list[TiePoint], params: RobustLossParams):
    """Raw residual closure: unweighted reprojection rows followed by the
    (pre-scaled) ground-anchor and position-prior rows.

    The robust loss enters the solve through per-iteration fixed weights,
    not through this closure, so finite differences of it stay smooth.
    """
    n = len(ties)
    obs = (
        np.array([[t.obs1.sample, t.obs1.line] for t in ties]),
        np.array([[t.obs2.sample, t.obs2.line] for t in ties]),
    )
    x0 = np.array([t.world for t in ties])
    cams = (cam1, cam2)
    sqrt_wg = np.sqrt(params.ground_constraint_weight)

    def fn(theta: np.ndarray) -> np.ndarray:
        world = theta[12:].reshape(n, 3)
        out = np.empty(4 * n + 3 * n + 6)
        for k in range(2):
            adj = CameraAdjustment(theta[6 * k:6 * k + 3], theta[6 * k + 3:6 * k + 6])
            cam = apply_adjustment(cams[k], adj)
            s, l, status = project_many(cam, world)
            r = np.column_stack([s, l]) - obs[k]
            r[status != 0] = _FAILED_RESIDUAL
            out[2 * n * k:2 * n * (k + 1)] = r.ravel()
        out[4 * n:7 * n] = (sqrt_wg * (world - x0)).ravel()
        out[7 * n:7 * n + 3] = theta[3:6] / params.position_sigma
        out[7 * n + 3:7 * n + 6] = theta[9:12] / params.position_sigma
        return out

    return fn


def _robust_cost(raw: np.ndarray, n_ties: int, c: float) -> float:
    """Cauchy-robustified reprojection cost plus quadratic constraint terms."""
    reproj = raw[: 4 * n_ties].reshape(2 * n_ties, 2)
    ssq = (reproj ** 2).sum(axis=1)
    rest = raw[4 * n_ties:]
    return float(cauchy_loss(ssq, c).sum() + (rest ** 2).sum())


def _robust_row_weights(raw: np.ndarray, n_ties: int, c: float) -> np.ndarray:
    """Per-row sqrt(d rho / d s) weights; constraint rows keep weight 1.

    With these weights W, (W J)^T (W r) is the exact half-gradient of the
    robust cost, so the weighted Gauss-Newton model is first-order
    consistent at the linearization point.
    """
    reproj = raw[: 4 * n_ties].reshape(2 * n_ties, 2)
    ssq = (reproj ** 2).sum(axis=1)
    w_obs = np.sqrt(cauchy_weight(ssq, c))
    weights = np.ones(raw.size)
    weights[: 4 * n_ties] = np.repeat(w_obs, 2)
    return weights


def blocked_jacobian(fn, theta: np.ndarray, n_ties: int, step: float = _FD_STEP) -> np.ndarray:
    """Central-difference Jacobian exploiting the tie-point block structure.

    Camera parameters are differenced one at a time; the three world-point
    axes are differenced for all ties simultaneously, which is exact because
    each residual row depends on at most one tie point.
    """
    m = 7 * n_ties + 6
    p = theta.size
    jac = np.zeros((m, p))
    for k in range(12):
        up = theta.copy()
        dn = theta.copy()
        up[k] += step
        dn[k] -= step
        jac[:, k] = (fn(up) - fn(dn)) / (2.0 * step)
    for axis in range(3):
        up = theta.copy()
        dn = theta.copy()
        up[12 + axis::3] += step
        dn[12 + axis::3] -= step
        diff = (fn(up) - fn(dn)) / (2.0 * step)
        for i in range(n_ties):
            col = 12 + 3 * i + axis
            rows = [2 * i, 2 * i + 1,
                    2 * n_ties + 2 * i, 2 * n_ties + 2 * i + 1,
                    4 * n_ties + 3 * i, 4 * n_ties + 3 * i + 1, 4 * n_ties + 3 * i + 2]
            jac[rows, col] = diff[rows]
    return jac


def bundle_adjust(
    cam1: PushbroomCamera,
    cam2: PushbroomCamera,
    ties: list[TiePoint],
    params: RobustLossParams | None = None,
) -> BundleResult:
    """Levenberg-Marquardt refinement of camera deltas and tie-point positions.

    Hitting the iteration cap is not an error; the best state is returned
    with ``hit_iteration_cap`` set.
    """
    params = params if params is not None else RobustLossParams()
    n = len(ties)
    if n < _MIN_TIES:
        raise InsufficientDataError(f"bundle adjustment needs >= {_MIN_TIES} tie points")

    fn = residual_function(cam1, cam2, ties, params)
    c = params.cauchy_scale_c
    theta = np.concatenate([np.zeros(12), np.array([t.world for t in ties]).ravel()])
    r = fn(theta)
    cost = _robust_cost(r, n, c)
    trace = [cost]
    lam = 1e-3
    iterations = 0
    hit_cap = False
    grad_inf = np.inf
    converged = False

    while not converged and not hit_cap:
        weights = _robust_row_weights(r, n, c)
        jac = blocked_jacobian(fn, theta, n) * weights[:, None]
        rw = r * weights
        g = jac.T @ rw
        grad_inf = float(np.max(np.abs(g)))
        if grad_inf < 1e-10:
            converged = True
            break
        jtj = jac.T @ jac
        diag = np.diag(jtj).copy()
        diag[diag < 1e-12] = 1e-12

        accepted = False
        while True:
            if iterations >= params.max_iterations:
                hit_cap = True
                break
            iterations += 1
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                raise GeometryError("singular normal equations in bundle adjustment")
            trial = theta + delta
            r_trial = fn(trial)
            cost_trial = _robust_cost(r_trial, n, c)
            if cost_trial < cost:
                rel_change = (cost - cost_trial) / max(cost, 1e-300)
                theta = trial
                r = r_trial
                cost = cost_trial
                trace.append(cost)
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                converged = rel_change < 1e-10
                break
            lam *= 10.0
            if lam > 1e14:
                break
        if not accepted and not hit_cap:
            break  # damping exhausted: no further descent possible

    adj1 = CameraAdjustment(theta[0:3], theta[3:6])
    adj2 = CameraAdjustment(theta[6:9], theta[9:12])
    return BundleResult(
        adjustments=(adj1, adj2),
        world=theta[12:].reshape(n, 3),
        final_cost=cost,
        iterations=iterations,
        hit_iteration_cap=hit_cap,
        cost_trace=trace,
        gradient_inf_norm=grad_inf,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_adjustments(adjs: tuple[CameraAdjustment, CameraAdjustment], path) -> None:
    lines = ["# bundle adjustment camera corrections"]
    for k, adj in enumerate(adjs, start=1):
        rot = " ".join(_fmt(v) for v in adj.rotation_delta)
        pos = " ".join(_fmt(v) for v in adj.position_delta)
        lines.append(f"camera{k}_rotation_rad = {rot}")
        lines.append(f"camera{k}_translation_m = {pos}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_adjustments(path) -> tuple[CameraAdjustment, CameraAdjustment]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = values'")
        key, _, rest = line.partition("=")
        try:
            values[key.strip()] = np.array([float(p) for p in rest.split()])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric adjustment value") from None
    adjs = []
    for k in (1, 2):
        try:
            rot = values[f"camera{k}_rotation_rad"]
            pos = values[f"camera{k}_translation_m"]
        except KeyError as exc:
            raise ParseError(f"{path}: missing key {exc}") from None
        adjs.append(CameraAdjustment(rot, pos))
    return adjs[0], adjs[1]


def write_ties(ties: list[TiePoint], path) -> None:
    with open(path, "w") as fh:
        fh.write("# s1 l1 s2 l2 x y z\n")
        for t in ties:
            vals = [t.obs1.sample, t.obs1.line, t.obs2.sample, t.obs2.line, *t.world]
            fh.write(" ".join(_fmt(v) for v in vals) + "\n")


def read_ties(path) -> list[TiePoint]:
    ties = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ParseError(f"{path}:{lineno}: tie rows need 7 values")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric tie value") from None
        ties.append(TiePoint(ImagePoint(vals[0], vals[1]),
                             ImagePoint(vals[2], vals[3]), np.array(vals[4:])))
    return ties
