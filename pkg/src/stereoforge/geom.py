"""Core geometric types and the pushbroom line-scan camera model.

3-vectors are plain float64 ``np.ndarray`` of shape (3,) in a local
body-fixed Cartesian frame (metres), or unit-norm when used as directions.

Camera frame convention: the per-line orientation matrix maps camera-frame
vectors into the body frame (``v_body = R @ v_cam``) and its columns are the
camera axes expressed in body coordinates:

* x -- cross-track, increasing detector sample,
* y -- along-track, direction of increasing line (flight),
* z -- boresight (viewing direction).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    BoundsError,
    ConvergenceError,
    DomainError,
    ProjectionError,
)

_ORTHO_TOL = 1e-9


def vec3(x: float, y: float, z: float) -> np.ndarray:
    return np.array([x, y, z], dtype=float)


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize to unit length; zero vectors are a domain error."""
    n = np.linalg.norm(v)
    if n == 0.0 or not np.isfinite(n):
        raise DomainError("cannot normalize zero or non-finite vector")
    return np.asarray(v, dtype=float) / n


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(w) @ v == np.cross(w, v)."""
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for a rotation vector (axis * angle, radians)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius sense) to ``m``, det +1."""
    u, _, vt = np.linalg.svd(m)
    if np.linalg.det(u @ vt) < 0.0:
        u = u.copy()
        u[:, -1] *= -1.0
    return u @ vt


def _orthonormalize_batch(ms: np.ndarray) -> np.ndarray:
    """Batched `orthonormalize` for an (n, 3, 3) stack."""
    u, _, vt = np.linalg.svd(ms)
    flip = np.linalg.det(u @ vt) < 0.0
    if np.any(flip):
        u = u.copy()
        u[flip, :, -1] *= -1.0
    return u @ vt


def is_rotation(m: np.ndarray, tol: float = _ORTHO_TOL) -> bool:
    return (
        m.shape == (3, 3)
        and np.max(np.abs(m.T @ m - np.eye(3))) <= tol
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


def look_at_orientation(boresight: np.ndarray, along_track: np.ndarray) -> np.ndarray:
    """Build a camera orientation from a viewing direction and flight direction.

    The along-track axis is the component of ``along_track`` orthogonal to the
    boresight, so the two inputs need not be perpendicular.
    """
    z = unit(np.asarray(boresight, dtype=float))
    y = np.asarray(along_track, dtype=float) - np.dot(along_track, z) * z
    y = unit(y)
    x = np.cross(y, z)
    return np.column_stack([x, y, z])


class ImagePoint(NamedTuple):
    sample: float
    line: float


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``p' = R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not is_rotation(r):
            raise DomainError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (n, 3) stack."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle_deg(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class Intrinsics:
    """Line-scan detector geometry: focal length and pitch in metres."""

    focal_length: float
    detector_pitch: float
    principal_sample: float
    n_samples: int

    def __post_init__(self):
        if self.focal_length <= 0.0 or self.detector_pitch <= 0.0:
            raise DomainError("focal_length and detector_pitch must be positive")
        if not 0.0 <= self.principal_sample < self.n_samples:
            raise DomainError("principal_sample must lie within the detector")


@dataclass(frozen=True)
class PushbroomCamera:
    """Per-line exterior orientation plus detector intrinsics.

    ``times`` (n,), ``positions`` (n, 3) and ``orientations`` (n, 3, 3) form
    the ephemeris; state between samples is piecewise-linear in position with
    a normalized-then-reorthonormalized blend of the bracketing rotations.
    """

    intrinsics: Intrinsics
    times: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray
    line_exposure: float
    n_lines: int
    start_time: float

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        p = np.array(self.positions, dtype=float).reshape(-1, 3)
        r = np.array(self.orientations, dtype=float).reshape(-1, 3, 3)
        if t.size < 2:
            raise DomainError("ephemeris needs at least 2 samples")
        if not np.all(np.diff(t) > 0.0):
            raise DomainError("ephemeris times must be strictly increasing")
        if t.size != p.shape[0] or t.size != r.shape[0]:
            raise DomainError("ephemeris arrays must have matching lengths")
        for m in r:
            if not is_rotation(m):
                raise DomainError("ephemeris orientations must be orthonormal")
        if self.line_exposure <= 0.0 or self.n_lines < 1:
            raise DomainError("line_exposure must be > 0 and n_lines >= 1")
        t_end = self.start_time + self.n_lines * self.line_exposure
        if t[0] > self.start_time + 1e-12 or t[-1] < t_end - 1e-12:
            raise DomainError("ephemeris does not cover the acquisition interval")
        for name, val in (("times", t), ("positions", p), ("orientations", r)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    def line_time(self, line):
        return self.start_time + np.asarray(line, dtype=float) * self.line_exposure


def _check_line_range(cam: PushbroomCamera, line, tol: float = 1e-9):
    line = np.asarray(line, dtype=float)
    if np.any(line < -tol) or np.any(line > cam.n_lines + tol):
        raise BoundsError(f"line outside [0, {cam.n_lines}]")


def states_at_lines(cam: PushbroomCamera, lines) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated camera state at each (possibly fractional) line.

    Returns ``(positions (n, 3), orientations (n, 3, 3))``.
    """
    lines = np.atleast_1d(np.asarray(lines, dtype=float))
    t = cam.line_time(lines)
    idx = np.searchsorted(cam.times, t, side="right") - 1
    idx = np.clip(idx, 0, cam.times.size - 2)
    t0 = cam.times[idx]
    t1 = cam.times[idx + 1]
    u = ((t - t0) / (t1 - t0))[:, None]
    pos = (1.0 - u) * cam.positions[idx] + u * cam.positions[idx + 1]
    blend = (1.0 - u[..., None]) * cam.orientations[idx] + u[..., None] * cam.orientations[idx + 1]
    return pos, _orthonormalize_batch(blend)


def state_at_line(cam: PushbroomCamera, line: float) -> tuple[np.ndarray, np.ndarray]:
    """Camera position and orientation at one line; bounds-checked."""
    _check_line_range(cam, line)
    pos, rot = states_at_lines(cam, [line])
    return pos[0], rot[0]


def _detector_direction(intr: Intrinsics, sample) -> np.ndarray:
    """Unit viewing direction in the camera frame for detector sample(s)."""
    s = np.atleast_1d(np.asarray(sample, dtype=float))
    x = (s - intr.principal_sample) * intr.detector_pitch
    d = np.column_stack([x, np.zeros_like(x), np.full_like(x, intr.focal_length)])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def back_project(cam: PushbroomCamera, p: ImagePoint) -> Ray:
    """Viewing ray of an image point: camera position plus rotated detector direction."""
    sample, line = float(p[0]), float(p[1])
    if not (-1e-9 <= sample <= cam.intrinsics.n_samples - 1 + 1e-9):
        raise BoundsError(f"sample {sample} outside [0, {cam.intrinsics.n_samples - 1}]")
    _check_line_range(cam, line)
    pos, rot = states_at_lines(cam, [line])
    d_cam = _detector_direction(cam.intrinsics, [sample])[0]
    return Ray(pos[0], rot[0] @ d_cam)


def back_project_many(cam: PushbroomCamera, samples, lines) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `back_project`: returns ``(origins (n, 3), directions (n, 3))``."""
    samples = np.atleast_1d(np.asarray(samples, dtype=float))
    lines = np.atleast_1d(np.asarray(lines, dtype=float))
    _check_line_range(cam, lines)
    pos, rot = states_at_lines(cam, lines)
    d_cam = _detector_direction(cam.intrinsics, samples)
    dirs = np.einsum("nij,nj->ni", rot, d_cam)
    return pos, dirs


def _tangent_at(cam: PushbroomCamera, lines: np.ndarray, pts: np.ndarray):
    """Along-track tangent of each point from its own candidate line.

    Returns ``(tangent, in_front, q)`` where q holds camera-frame coordinates;
    the projection root is tangent == 0 with the boresight coordinate positive.
    """
    pos, rot = states_at_lines(cam, lines)
    q = np.einsum("nji,nj->ni", rot, pts - pos)  # R^T (P - pos)
    with np.errstate(divide="ignore", invalid="ignore"):
        tan = q[:, 1] / q[:, 2]
    return tan, q[:, 2] > 0.0, q


PROJECT_OK = 0
PROJECT_NO_LINE = 1
PROJECT_NO_CONVERGENCE = 2


def project_many(cam: PushbroomCamera, pts: np.ndarray, n_scan: int = 48,
                 tol_lines: float = 1e-6, max_iter: int = 100):
    """Project (n, 3) body-frame points onto the image.

    Returns ``(samples, lines, status)``; failed points carry NaN coordinates
    and a non-zero status (PROJECT_NO_LINE / PROJECT_NO_CONVERGENCE). The
    per-point line-time root is bracketed on a coarse scan shared by all
    points, bisected, then Newton-polished well below ``tol_lines``.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    samples = np.full(n, np.nan)
    lines_out = np.full(n, np.nan)
    status = np.full(n, PROJECT_NO_LINE, dtype=np.int8)
    if n == 0:
        return samples, lines_out, status

    # coarse scan: states computed once, tangents for all points at all lines
    scan = np.linspace(0.0, float(cam.n_lines), n_scan + 1)
    pos_s, rot_s = states_at_lines(cam, scan)
    diff = pts[None, :, :] - pos_s[:, None, :]  # (k, n, 3)
    q = np.einsum("kji,knj->kni", rot_s, diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = q[:, :, 1] / q[:, :, 2]
    ok = q[:, :, 2] > 0.0
    cross = (g[:-1] * g[1:] <= 0.0) & ok[:-1] & ok[1:]
    cross &= np.isfinite(g[:-1]) & np.isfinite(g[1:])
    has = cross.any(axis=0)
    if not np.any(has):
        return samples, lines_out, status
    first = np.argmax(cross, axis=0)

    idx = np.flatnonzero(has)
    lo = scan[first[idx]]
    hi = scan[first[idx] + 1]
    glo = g[first[idx], idx]
    p_act = pts[idx]

    iters = 0
    while np.max(hi - lo) > 1e-3 and iters < max_iter:
        mid = 0.5 * (lo + hi)
        gm, _, _ = _tangent_at(cam, mid, p_act)
        left = glo * gm <= 0.0
        hi = np.where(left, mid, hi)
        glo_new = np.where(left, glo, gm)
        lo = np.where(left, lo, mid)
        glo = glo_new
        iters += 1

    # Newton polish with finite-difference slope, clamped into the bracket
    l_cur = 0.5 * (lo + hi)
    h = 1e-5
    tol = min(tol_lines, 1e-11 * max(1.0, cam.n_lines))
    converged = np.zeros(l_cur.shape, dtype=bool)
    while not np.all(converged) and iters < max_iter:
        up = np.clip(l_cur + h, 0.0, cam.n_lines)
        dn = np.clip(l_cur - h, 0.0, cam.n_lines)
        gp, _, _ = _tangent_at(cam, up, p_act)
        gm, _, _ = _tangent_at(cam, dn, p_act)
        gc, _, _ = _tangent_at(cam, l_cur, p_act)
        slope = (gp - gm) / (up - dn)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(np.abs(slope) > 0, gc / slope, 0.0)
        l_new = np.clip(l_cur - step, lo, hi)
        converged = np.abs(l_new - l_cur) < tol
        l_cur = l_new
        iters += 1

    good = converged
    status[idx[~good]] = PROJECT_NO_CONVERGENCE
    idx = idx[good]
    if idx.size == 0:
        return samples, lines_out, status
    l_cur = l_cur[good]
    p_act = p_act[good]

    _, _, q = _tangent_at(cam, l_cur, p_act)
    intr = cam.intrinsics
    s = intr.principal_sample + intr.focal_length * (q[:, 0] / q[:, 2]) / intr.detector_pitch
    samples[idx] = s
    lines_out[idx] = l_cur
    status[idx] = PROJECT_OK
    return samples, lines_out, status


def project(cam: PushbroomCamera, point: np.ndarray) -> ImagePoint:
    """Project one body-frame point; raises when no line in range observes it."""
    s, l, status = project_many(cam, np.asarray(point, dtype=float)[None, :])
    if status[0] == PROJECT_NO_LINE:
        raise ProjectionError("no line in [0, n_lines] observes the point")
    if status[0] == PROJECT_NO_CONVERGENCE:
        raise ConvergenceError("line-time root search did not converge")
    return ImagePoint(float(s[0]), float(l[0]))


def transform_camera(cam: PushbroomCamera, rt: RigidTransform) -> PushbroomCamera:
    """Apply a rigid body-frame motion to the whole ephemeris."""
    return PushbroomCamera(
        intrinsics=cam.intrinsics,
        times=cam.times.copy(),
        positions=rt.apply(cam.positions),
        orientations=np.einsum("ij,njk->nik", rt.rotation, cam.orientations),
        line_exposure=cam.line_exposure,
        n_lines=cam.n_lines,
        start_time=cam.start_time,
    )
