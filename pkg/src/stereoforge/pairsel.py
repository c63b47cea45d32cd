"""Stereo pair screening from acquisition metadata.

Candidate pairs are scored on footprint overlap, illumination similarity,
baseline-to-height ratio and the convergence angle implied by it, then
ranked by how close their B/H sits to the middle of the accepted window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DomainError
from .ingest import AcquisitionMeta

#: expected-precision proportionality constant (relative precision only)
PRECISION_RHO_PX = 1.0


@dataclass(frozen=True)
class PairGeometry:
    """Stereo geometry descriptors for one candidate pair."""

    baseline: float          # metres
    height: float            # metres, mean of the two altitudes
    bh_ratio: float
    convergence_deg: float
    overlap_fraction: float
    d_incidence: float       # degrees
    d_azimuth: float         # degrees
    expected_precision: float  # metres

    def __post_init__(self):
        if self.baseline < 0:
            raise DomainError("baseline must be >= 0")
        if not 0.0 <= self.convergence_deg < 180.0:
            raise DomainError("convergence angle must be in [0, 180)")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise DomainError("overlap fraction must be in [0, 1]")
        if abs(self.bh_ratio - self.baseline / self.height) > 1e-12 * max(1.0, self.bh_ratio):
            raise DomainError("bh_ratio must equal baseline/height")


@dataclass(frozen=True)
class PairThresholds:
    """Acceptance window for candidate pairs; all bounds configurable."""

    bh_min: float = 0.3
    bh_max: float = 0.9
    max_d_incidence: float = 10.0
    max_d_azimuth: float = 20.0
    min_overlap: float = 0.3

    def __post_init__(self):
        if self.bh_min >= self.bh_max:
            raise DomainError("bh_min must be < bh_max")
        if min(self.bh_min, self.max_d_incidence, self.max_d_azimuth, self.min_overlap) < 0:
            raise DomainError("thresholds must be non-negative")


def baseline(s1: np.ndarray, s2: np.ndarray) -> float:
    """Distance between the two spacecraft positions."""
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))):
        raise DomainError("spacecraft positions must be finite")
    return float(np.linalg.norm(s1 - s2))


def bh_ratio(b: float, h: float) -> float:
    if h <= 0.0:
        raise DomainError("height must be positive")
    return b / h


def convergence_from_views(v1: np.ndarray, v2: np.ndarray) -> float:
    """Angle between two unit viewing directions, degrees in [0, 180]."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    for v in (v1, v2):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise DomainError("viewing directions must be unit vectors")
    dot = float(np.clip(np.dot(v1, v2), -1.0, 1.0))
    return math.degrees(math.acos(dot))


def convergence_from_bh(bh: float) -> float:
    """Symmetric-geometry approximation of the convergence angle, degrees."""
    if bh < 0.0:
        raise DomainError("B/H must be >= 0")
    return math.degrees(2.0 * math.atan(bh / 2.0))


def expected_precision(rho_px: float, gsd: float, theta_deg: float) -> float:
    """Relative height precision rho * GSD / tan(theta) in metres."""
    if theta_deg <= 0.0 or theta_deg >= 90.0:
        raise DomainError("convergence angle must be in (0, 90) degrees")
    if gsd <= 0.0 or rho_px <= 0.0:
        raise DomainError("gsd and rho must be positive")
    return rho_px * gsd / math.tan(math.radians(theta_deg))


# ---------------------------------------------------------------------------
# footprint overlap by convex polygon clipping
# ---------------------------------------------------------------------------

def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if _signed_area(poly) > 0 else poly[::-1]


def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject by a CCW convex polygon."""
    output = list(subject)
    n = len(clip)
    for k in range(n):
        a = clip[k]
        b = clip[(k + 1) % n]
        edge = np.array([b[0] - a[0], b[1] - a[1]])
        input_pts = output
        output = []
        if not input_pts:
            break
        for i in range(len(input_pts)):
            p = input_pts[i]
            q = input_pts[(i + 1) % len(input_pts)]
            side_p = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
            side_q = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
            if side_p >= 0:
                output.append(p)
            if (side_p < 0) != (side_q < 0):
                t = side_p / (side_p - side_q)
                output.append(p + t * (q - p))
    return np.array(output) if output else np.zeros((0, 2))


def footprint_overlap(a: AcquisitionMeta, b: AcquisitionMeta) -> float:
    """Intersection area over the smaller footprint, in the tangent plane."""
    pa = _ccw(a.footprint[:, :2].astype(float))
    pb = _ccw(b.footprint[:, :2].astype(float))
    area_a = _signed_area(pa)
    area_b = _signed_area(pb)
    if area_a <= 0 or area_b <= 0:
        raise DomainError("degenerate footprint")
    inter = _clip_convex(pa, pb)
    if inter.shape[0] < 3:
        return 0.0
    area_i = abs(_signed_area(inter))
    return float(min(1.0, area_i / min(area_a, area_b)))


# ---------------------------------------------------------------------------
# pair ranking
# ---------------------------------------------------------------------------

def _azimuth_difference(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def pair_geometry(a: AcquisitionMeta, b: AcquisitionMeta) -> PairGeometry:
    """Stereo descriptors from mid-acquisition states and illumination."""
    s1 = a.position_at(a.mid_time())
    s2 = b.position_at(b.mid_time())
    base = baseline(s1, s2)
    height = 0.5 * (a.altitude + b.altitude)
    bh = bh_ratio(base, height)
    theta = convergence_from_bh(bh)
    gsd = 0.5 * (a.gsd + b.gsd)
    ep = expected_precision(PRECISION_RHO_PX, gsd, theta) if 0.0 < theta < 90.0 else math.inf
    return PairGeometry(
        baseline=base,
        height=height,
        bh_ratio=bh,
        convergence_deg=theta,
        overlap_fraction=footprint_overlap(a, b),
        d_incidence=abs(a.solar_incidence - b.solar_incidence),
        d_azimuth=_azimuth_difference(a.solar_azimuth, b.solar_azimuth),
        expected_precision=ep,
    )


def passes_thresholds(geo: PairGeometry, thr: PairThresholds) -> bool:
    return (
        thr.bh_min <= geo.bh_ratio <= thr.bh_max
        and geo.d_incidence <= thr.max_d_incidence
        and geo.d_azimuth <= thr.max_d_azimuth
        and geo.overlap_fraction >= thr.min_overlap
    )


def rank_pairs(
    metas: list[AcquisitionMeta],
    thresholds: PairThresholds | None = None,
) -> list[tuple[tuple[str, str], PairGeometry]]:
    """Score all pairs, drop threshold failures, rank deterministically.

    Survivors sort by |B/H - window midpoint| ascending, ties broken by
    larger overlap, then lexicographic product ids.
    """
    thr = thresholds if thresholds is not None else PairThresholds()
    mid = 0.5 * (thr.bh_min + thr.bh_max)
    scored = []
    for a, b in combinations(sorted(metas, key=lambda m: m.product_id), 2):
        geo = pair_geometry(a, b)
        if passes_thresholds(geo, thr):
            scored.append(((a.product_id, b.product_id), geo))
    scored.sort(key=lambda item: (abs(item[1].bh_ratio - mid),
                                  -item[1].overlap_fraction,
                                  item[0][0], item[0][1]))
    return scored
