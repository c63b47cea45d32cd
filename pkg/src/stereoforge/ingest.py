"""Acquisition-metadata sidecars and the raster / image / point-cloud formats.

Formats are deliberately plain text or PGM so fixtures diff cleanly:

* sidecar  -- ``key = value`` lines, ``#`` comments; ``ephemeris`` and
  ``footprint`` keys open multi-line blocks terminated by the next key,
* DEM grid -- 6-line header (ncols, nrows, xllcorner, yllcorner, cellsize,
  nodata_value) then whitespace-separated row-major values, north row first,
* image    -- binary 16-bit big-endian ``P5`` PGM,
* cloud    -- one ``x y z [err]`` line per point.

Floats are serialized with ``%.17g`` so every write/read round trip is
bit-identical.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DomainError, FormatError, ParseError
from .geom import Intrinsics, PushbroomCamera

DEFAULT_NODATA = -32768.0

_FLOAT_FMT = "%.17g"


def _fmt(x: float) -> str:
    return _FLOAT_FMT % float(x)


# ---------------------------------------------------------------------------
# acquisition metadata
# ---------------------------------------------------------------------------

_MANDATORY_KEYS = (
    "product_id",
    "gsd_m",
    "altitude_km",
    "start_time_s",
    "line_exposure_s",
    "n_lines",
    "n_samples",
    "solar_incidence_deg",
    "solar_azimuth_deg",
    "ephemeris",
    "footprint",
)

# optional keys make synthetic fixtures self-describing
_OPTIONAL_KEYS = ("focal_length_m", "detector_pitch_m", "principal_sample")


@dataclass
class AcquisitionMeta:
    """Everything pair selection and camera construction need for one image."""

    product_id: str
    gsd: float                      # metres / pixel
    altitude: float                 # metres
    start_time: float               # s
    line_exposure: float            # s / line
    n_lines: int
    n_samples: int
    solar_incidence: float          # degrees from vertical
    solar_azimuth: float            # degrees clockwise from north (+y)
    eph_times: np.ndarray           # (n,)
    eph_positions: np.ndarray       # (n, 3)
    eph_orientations: np.ndarray    # (n, 3, 3)
    footprint: np.ndarray           # (4, 3) corner points, ring order
    focal_length: Optional[float] = None
    detector_pitch: Optional[float] = None
    principal_sample: Optional[float] = None

    def __post_init__(self):
        if self.gsd <= 0.0 or self.altitude <= 0.0:
            raise DomainError("gsd and altitude must be positive")
        if self.n_lines < 1 or self.n_samples < 1:
            raise DomainError("n_lines and n_samples must be >= 1")
        if not 0.0 <= self.solar_incidence <= 90.0:
            raise DomainError("solar_incidence must be in [0, 90]")
        if not 0.0 <= self.solar_azimuth < 360.0:
            raise DomainError("solar_azimuth must be in [0, 360)")
        self.eph_times = np.asarray(self.eph_times, dtype=float).reshape(-1)
        self.eph_positions = np.asarray(self.eph_positions, dtype=float).reshape(-1, 3)
        self.eph_orientations = np.asarray(self.eph_orientations, dtype=float).reshape(-1, 3, 3)
        self.footprint = np.asarray(self.footprint, dtype=float).reshape(4, 3)
        if self.eph_times.size < 2:
            raise DomainError("ephemeris needs at least 2 samples")
        order = np.argsort(self.eph_times, kind="stable")
        self.eph_times = self.eph_times[order]
        self.eph_positions = self.eph_positions[order]
        self.eph_orientations = self.eph_orientations[order]
        if _ring_area_xy(self.footprint) <= 0.0:
            raise DomainError("footprint corners are degenerate")

    def mid_time(self) -> float:
        return self.start_time + 0.5 * self.n_lines * self.line_exposure

    def position_at(self, t: float) -> np.ndarray:
        """Ephemeris position linearly interpolated at time t."""
        return np.array(
            [np.interp(t, self.eph_times, self.eph_positions[:, k]) for k in range(3)]
        )


def _ring_area_xy(corners: np.ndarray) -> float:
    x, y = corners[:, 0], corners[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def parse_meta(path) -> AcquisitionMeta:
    """Parse a metadata sidecar; errors name the missing key or bad line."""
    path = Path(path)
    scalars: dict[str, str] = {}
    scalar_lines: dict[str, int] = {}
    blocks: dict[str, list[tuple[int, str]]] = {}
    current_block = None
    key_re = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")

    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = key_re.match(line)
        if m:
            key, value = m.group(1), m.group(2).strip()
            if key in ("ephemeris", "footprint"):
                current_block = key
                blocks[key] = []
                if value:
                    blocks[key].append((lineno, value))
            else:
                current_block = None
                scalars[key] = value
                scalar_lines[key] = lineno
        elif current_block is not None:
            blocks[current_block].append((lineno, line))
        else:
            raise ParseError(f"{path.name}:{lineno}: data line outside a block")

    for key in _MANDATORY_KEYS:
        present = key in blocks if key in ("ephemeris", "footprint") else key in scalars
        if not present:
            raise ParseError(f"{path.name}: missing mandatory key '{key}'")

    def number(key):
        try:
            return float(scalars[key])
        except ValueError:
            raise ParseError(
                f"{path.name}:{scalar_lines[key]}: non-numeric value for '{key}'"
            ) from None

    def block_rows(key, width):
        rows = []
        for lineno, text in blocks[key]:
            parts = text.split()
            if len(parts) != width:
                raise ParseError(
                    f"{path.name}:{lineno}: '{key}' row needs {width} values"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(
                    f"{path.name}:{lineno}: non-numeric value in '{key}' row"
                ) from None
        return np.array(rows, dtype=float)

    eph = block_rows("ephemeris", 13)
    if eph.shape[0] < 2:
        raise ParseError(f"{path.name}: 'ephemeris' needs at least 2 rows")
    fp = block_rows("footprint", 3)
    if fp.shape[0] != 4:
        raise ParseError(f"{path.name}: 'footprint' needs exactly 4 rows")

    opt = {}
    for key, attr in (
        ("focal_length_m", "focal_length"),
        ("detector_pitch_m", "detector_pitch"),
        ("principal_sample", "principal_sample"),
    ):
        if key in scalars:
            opt[attr] = number(key)

    return AcquisitionMeta(
        product_id=scalars["product_id"],
        gsd=number("gsd_m"),
        altitude=number("altitude_km") * 1000.0,
        start_time=number("start_time_s"),
        line_exposure=number("line_exposure_s"),
        n_lines=int(number("n_lines")),
        n_samples=int(number("n_samples")),
        solar_incidence=number("solar_incidence_deg"),
        solar_azimuth=number("solar_azimuth_deg"),
        eph_times=eph[:, 0],
        eph_positions=eph[:, 1:4],
        eph_orientations=eph[:, 4:13].reshape(-1, 3, 3),
        footprint=fp,
        **opt,
    )


def write_meta(meta: AcquisitionMeta, path) -> None:
    lines = [
        f"product_id = {meta.product_id}",
        f"gsd_m = {_fmt(meta.gsd)}",
        f"altitude_km = {_fmt(meta.altitude / 1000.0)}",
        f"start_time_s = {_fmt(meta.start_time)}",
        f"line_exposure_s = {_fmt(meta.line_exposure)}",
        f"n_lines = {meta.n_lines}",
        f"n_samples = {meta.n_samples}",
        f"solar_incidence_deg = {_fmt(meta.solar_incidence)}",
        f"solar_azimuth_deg = {_fmt(meta.solar_azimuth)}",
    ]
    if meta.focal_length is not None:
        lines.append(f"focal_length_m = {_fmt(meta.focal_length)}")
    if meta.detector_pitch is not None:
        lines.append(f"detector_pitch_m = {_fmt(meta.detector_pitch)}")
    if meta.principal_sample is not None:
        lines.append(f"principal_sample = {_fmt(meta.principal_sample)}")
    lines.append("ephemeris =")
    for t, p, r in zip(meta.eph_times, meta.eph_positions, meta.eph_orientations):
        vals = [t, *p, *r.reshape(9)]
        lines.append("  " + " ".join(_fmt(v) for v in vals))
    lines.append("footprint =")
    for corner in meta.footprint:
        lines.append("  " + " ".join(_fmt(v) for v in corner))
    Path(path).write_text("\n".join(lines) + "\n")


def camera_from_meta(
    meta: AcquisitionMeta,
    focal_length: Optional[float] = None,
    detector_pitch: Optional[float] = None,
    principal_sample: Optional[float] = None,
) -> PushbroomCamera:
    """Build the sensor model; explicit arguments override sidecar intrinsics."""
    f = focal_length if focal_length is not None else meta.focal_length
    pitch = detector_pitch if detector_pitch is not None else meta.detector_pitch
    ps = principal_sample if principal_sample is not None else meta.principal_sample
    if f is None or pitch is None:
        raise DomainError(
            "camera intrinsics missing: provide focal_length / detector_pitch "
            "via the sidecar or configuration"
        )
    if ps is None:
        ps = (meta.n_samples - 1) / 2.0
    intr = Intrinsics(
        focal_length=f,
        detector_pitch=pitch,
        principal_sample=ps,
        n_samples=meta.n_samples,
    )
    return PushbroomCamera(
        intrinsics=intr,
        times=meta.eph_times,
        positions=meta.eph_positions,
        orientations=meta.eph_orientations,
        line_exposure=meta.line_exposure,
        n_lines=meta.n_lines,
        start_time=meta.start_time,
    )


# ---------------------------------------------------------------------------
# DEM grid
# ---------------------------------------------------------------------------

@dataclass
class DemGrid:
    """Georeferenced elevation raster on a local metric grid.

    ``values`` is (n_rows, n_cols) with row 0 the northernmost; the origin is
    the lower-left corner of the lower-left cell. Cells are either finite
    elevations or exactly the nodata sentinel.
    """

    origin_x: float
    origin_y: float
    cell_size: float
    values: np.ndarray
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if self.cell_size <= 0.0:
            raise DomainError("cell_size must be positive")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DomainError("values must be a 2-D array")
        bad = ~np.isfinite(self.values) & ~(self.values == self.nodata)
        if np.any(bad):
            raise DomainError("DEM values must be finite or exactly the nodata sentinel")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.nodata

    @property
    def x_max(self) -> float:
        return self.origin_x + self.n_cols * self.cell_size

    @property
    def y_max(self) -> float:
        return self.origin_y + self.n_rows * self.cell_size

    def same_lattice(self, other: "DemGrid", tol: float = 1e-9) -> bool:
        return (
            self.values.shape == other.values.shape
            and abs(self.origin_x - other.origin_x) <= tol
            and abs(self.origin_y - other.origin_y) <= tol
            and abs(self.cell_size - other.cell_size) <= tol
        )

    def cell_center_x(self, col) -> np.ndarray:
        return self.origin_x + (np.asarray(col, dtype=float) + 0.5) * self.cell_size

    def cell_center_y(self, row) -> np.ndarray:
        return self.origin_y + (self.n_rows - np.asarray(row, dtype=float) - 0.5) * self.cell_size

    def frac_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Fractional (row, col) of metric coordinates; inverse of cell centers."""
        col = (np.asarray(x, dtype=float) - self.origin_x) / self.cell_size - 0.5
        row = (self.origin_y + self.n_rows * self.cell_size - np.asarray(y, dtype=float)) / self.cell_size - 0.5
        return row, col

    def sample_bilinear(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear elevation at metric (x, y); (values, valid_mask) arrays.

        A sample is invalid when outside the cell-center hull or when any of
        its four contributing cells is nodata.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        row, col = self.frac_index(x, y)
        r0 = np.floor(row).astype(int)
        c0 = np.floor(col).astype(int)
        inside = (r0 >= 0) & (r0 <= self.n_rows - 2) & (c0 >= 0) & (c0 <= self.n_cols - 2)
        r0c = np.clip(r0, 0, max(self.n_rows - 2, 0))
        c0c = np.clip(c0, 0, max(self.n_cols - 2, 0))
        fr = row - r0c
        fc = col - c0c
        v00 = self.values[r0c, c0c]
        v01 = self.values[r0c, c0c + 1]
        v10 = self.values[r0c + 1, c0c]
        v11 = self.values[r0c + 1, c0c + 1]
        ok = self.valid
        good = inside & ok[r0c, c0c] & ok[r0c, c0c + 1] & ok[r0c + 1, c0c] & ok[r0c + 1, c0c + 1]
        z = (
            v00 * (1 - fr) * (1 - fc)
            + v01 * (1 - fr) * fc
            + v10 * fr * (1 - fc)
            + v11 * fr * fc
        )
        return np.where(good, z, np.nan), good

    def gradient(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Central-difference slope fields (dz/dx, dz/dy, valid)."""
        v = self.values
        ok = self.valid
        gx = np.full_like(v, 0.0)
        gy = np.full_like(v, 0.0)
        gvalid = np.zeros_like(ok)
        if self.n_cols >= 3:
            okx = ok[:, 2:] & ok[:, :-2]
            gx[:, 1:-1] = np.where(okx, (v[:, 2:] - v[:, :-2]) / (2 * self.cell_size), 0.0)
        if self.n_rows >= 3:
            oky = ok[2:, :] & ok[:-2, :]
            # row index grows southward, so dz/dy uses (north - south)
            gy[1:-1, :] = np.where(oky, (v[:-2, :] - v[2:, :]) / (2 * self.cell_size), 0.0)
        if self.n_cols >= 3 and self.n_rows >= 3:
            gvalid[1:-1, 1:-1] = (
                ok[1:-1, 1:-1]
                & ok[1:-1, 2:] & ok[1:-1, :-2]
                & ok[2:, 1:-1] & ok[:-2, 1:-1]
            )
        return gx, gy, gvalid

    def copy(self) -> "DemGrid":
        return DemGrid(self.origin_x, self.origin_y, self.cell_size,
                       self.values.copy(), self.nodata)


def write_dem(dem: DemGrid, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"ncols {dem.n_cols}\n")
        fh.write(f"nrows {dem.n_rows}\n")
        fh.write(f"xllcorner {_fmt(dem.origin_x)}\n")
        fh.write(f"yllcorner {_fmt(dem.origin_y)}\n")
        fh.write(f"cellsize {_fmt(dem.cell_size)}\n")
        fh.write(f"nodata_value {_fmt(dem.nodata)}\n")
        for row in dem.values:
            fh.write(" ".join(_fmt(v) for v in row))
            fh.write("\n")


def read_dem(path) -> DemGrid:
    tokens = Path(path).read_text().split()
    if len(tokens) < 12:
        raise FormatError(f"{path}: truncated DEM header")
    header = {}
    for k in range(6):
        header[tokens[2 * k].lower()] = tokens[2 * k + 1]
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        origin_x = float(header["xllcorner"])
        origin_y = float(header["yllcorner"])
        cell = float(header["cellsize"])
        nodata = float(header["nodata_value"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad DEM header ({exc})") from None
    body = tokens[12:]
    if len(body) != ncols * nrows:
        raise FormatError(
            f"{path}: expected {ncols * nrows} values, found {len(body)}"
        )
    try:
        values = np.array(body, dtype=float).reshape(nrows, ncols)
    except ValueError:
        raise FormatError(f"{path}: non-numeric DEM value") from None
    return DemGrid(origin_x, origin_y, cell, values, nodata)


# ---------------------------------------------------------------------------
# raster image (16-bit PGM)
# ---------------------------------------------------------------------------

@dataclass
class RasterImage:
    """Radiance counts, (n_rows, n_cols) float64, all finite."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DomainError("image values must be a 2-D array")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("image values must be finite")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


def write_image(img: RasterImage, path) -> None:
    """Write as 16-bit big-endian PGM; values are rounded and clipped."""
    data = np.clip(np.rint(img.values), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.n_cols} {img.n_rows}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_image(path) -> RasterImage:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval -- comments allowed
    pos = 0
    fields = []
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header field") from None
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit PGM (maxval 65535)")
    body = raw[pos:]
    expected = width * height * 2
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    values = np.frombuffer(body, dtype=">u2").reshape(height, width).astype(float)
    return RasterImage(values)


# ---------------------------------------------------------------------------
# point cloud
# ---------------------------------------------------------------------------

@dataclass
class PointCloud:
    """Triangulated surface points with optional per-point miss distances."""

    points: np.ndarray
    errors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise DomainError("cloud coordinates must be finite")
        if self.errors is not None:
            self.errors = np.asarray(self.errors, dtype=float).reshape(-1)
            if self.errors.shape[0] != self.points.shape[0]:
                raise DomainError("errors length must match points")
            if np.any(self.errors < 0) or not np.all(np.isfinite(self.errors)):
                raise DomainError("triangulation errors must be finite and >= 0")

    def __len__(self) -> int:
        return self.points.shape[0]


def write_cloud(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        if cloud.errors is None:
            for p in cloud.points:
                fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        else:
            for p, e in zip(cloud.points, cloud.errors):
                fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {_fmt(e)}\n")


def read_cloud(path) -> PointCloud:
    pts = []
    errs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise FormatError(f"{path}:{lineno}: cloud rows need 3 or 4 values")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric cloud value") from None
        pts.append(vals[:3])
        errs.append(vals[3] if len(vals) == 4 else np.nan)
    pts_arr = np.array(pts, dtype=float).reshape(-1, 3)
    errs_arr = np.array(errs, dtype=float)
    has_err = np.isfinite(errs_arr)
    if pts_arr.shape[0] and has_err.all():
        return PointCloud(pts_arr, errs_arr)
    if pts_arr.shape[0] and has_err.any():
        raise FormatError(f"{path}: mixed rows with and without error column")
    return PointCloud(pts_arr, None)
