"""Dense NCC block matching with subpixel refinement and crop windows.

The right image is first resampled through the affine pre-alignment (fitted
from tie points) so the search becomes a pure integer-offset translation
search; box sums over integral images then evaluate the full correlation
stack in O(offsets * pixels). The reported disparity is the total
displacement ``m(p + d_w) - p`` in full-frame pixel coordinates, so crop
windows only select which pixels are processed.

Both kernel builds (numba / numpy) run the same summation order, band
layout and tie-breaking, so they agree bit-for-bit; validity is encoded in
the correlation stack with a -2 sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ._backend import njit, numba_enabled, prange
from .errors import DomainError, FormatError
from .ingest import RasterImage, _fmt

_INVALID = -2.0
_BAND_ROWS = 64


@dataclass(frozen=True)
class MatchParams:
    window_radius: int = 7
    search_x: tuple[int, int] = (-16, 16)
    search_y: tuple[int, int] = (-3, 3)
    min_ncc: float = 0.5
    left_crop: Optional[tuple[int, int, int, int]] = None   # x, y, width, height
    right_crop: Optional[tuple[int, int, int, int]] = None

    def __post_init__(self):
        if self.window_radius < 1:
            raise DomainError("window_radius must be >= 1")
        if self.search_x[0] > self.search_x[1] or self.search_y[0] > self.search_y[1]:
            raise DomainError("search ranges must be non-empty")
        for crop in (self.left_crop, self.right_crop):
            if crop is not None and (crop[2] < 1 or crop[3] < 1):
                raise DomainError("crop width and height must be >= 1")


@dataclass
class DisparityMap:
    """Per-pixel displacement field over the (cropped) left image.

    ``origin_col`` / ``origin_row`` anchor the map in full-frame left-image
    pixel coordinates so downstream triangulation needs no extra crop state.
    """

    dx: np.ndarray
    dy: np.ndarray
    valid: np.ndarray
    origin_col: int = 0
    origin_row: int = 0

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=float)
        self.dy = np.asarray(self.dy, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.dx.shape == self.dy.shape == self.valid.shape):
            raise DomainError("dx, dy and valid must share a shape")
        if np.any(~np.isfinite(self.dx[self.valid])) or np.any(~np.isfinite(self.dy[self.valid])):
            raise DomainError("valid disparities must be finite")

    @property
    def n_rows(self) -> int:
        return self.dx.shape[0]

    @property
    def n_cols(self) -> int:
        return self.dx.shape[1]


# ---------------------------------------------------------------------------
# windowed correlation and affine helpers
# ---------------------------------------------------------------------------

def ncc(win1: np.ndarray, win2: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation; NaN for zero-variance input."""
    win1 = np.asarray(win1, dtype=float)
    win2 = np.asarray(win2, dtype=float)
    if win1.shape != win2.shape:
        raise DomainError("correlation windows must have equal shapes")
    a = win1 - win1.mean()
    b = win2 - win2.mean()
    den2 = float((a * a).sum()) * float((b * b).sum())
    scale = max(1.0, float(win1.mean()) ** 2, float(win2.mean()) ** 2)
    if den2 <= (1e-9 * scale * win1.size) ** 2:
        return float("nan")
    return float(np.clip((a * b).sum() / np.sqrt(den2), -1.0, 1.0))


def estimate_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares 2x3 affine mapping (x, y) src points onto dst points."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if src.shape[0] < 3:
        raise DomainError("affine fit needs at least 3 points")
    design = np.column_stack([src, np.ones(src.shape[0])])
    if np.linalg.matrix_rank(design) < 3:
        raise DomainError("affine fit points are collinear")
    coef, _, _, _ = np.linalg.lstsq(design, dst, rcond=None)
    return coef.T  # (2, 3)


def invert_affine(aff: np.ndarray) -> np.ndarray:
    a = np.asarray(aff, dtype=float).reshape(2, 3)
    inv = np.linalg.inv(a[:, :2])
    return np.column_stack([inv, -inv @ a[:, 2]])


def apply_affine(aff: np.ndarray, x, y):
    a = np.asarray(aff, dtype=float)
    return (a[0, 0] * x + a[0, 1] * y + a[0, 2],
            a[1, 0] * x + a[1, 1] * y + a[1, 2])


def _warp_affine(img: np.ndarray, aff: np.ndarray) -> np.ndarray:
    """Bilinear resample of ``img`` at affine-mapped coordinates, NaN outside."""
    rows, cols = img.shape
    y, x = np.mgrid[0:rows, 0:cols].astype(float)
    mx, my = apply_affine(aff, x, y)
    x0 = np.floor(mx).astype(np.int64)
    y0 = np.floor(my).astype(np.int64)
    ok = (x0 >= 0) & (x0 <= cols - 2) & (y0 >= 0) & (y0 <= rows - 2)
    x0c = np.clip(x0, 0, cols - 2)
    y0c = np.clip(y0, 0, rows - 2)
    fx = mx - x0c
    fy = my - y0c
    out = (
        img[y0c, x0c] * (1 - fy) * (1 - fx)
        + img[y0c, x0c + 1] * (1 - fy) * fx
        + img[y0c + 1, x0c] * fy * (1 - fx)
        + img[y0c + 1, x0c + 1] * fy * fx
    )
    return np.where(ok, out, np.nan)


def _integral(a: np.ndarray) -> np.ndarray:
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return s


# ---------------------------------------------------------------------------
# correlation stack kernels
# ---------------------------------------------------------------------------

def _fill_stack_numpy(left, rw0, sl, sl2, sr, sr2, sv, allowed,
                      row0, row1, dx_min, dy_min, n_dx, n_dy, w, stack):
    rows, cols = left.shape
    band = row1 - row0
    area = float((2 * w + 1) ** 2)
    stack[...] = _INVALID

    r = np.arange(row0, row1)
    c = np.arange(cols)
    row_ok = (r >= w) & (r < rows - w)
    col_ok = (c >= w) & (c < cols - w)
    if not row_ok.any():
        return
    rl = np.clip(r, w, rows - w - 1)
    # left-window box sums, shape (band, cols)
    def box(s, rr, cc):
        return (s[rr + w + 1][:, cc + w + 1] - s[rr - w][:, cc + w + 1]
                - s[rr + w + 1][:, cc - w] + s[rr - w][:, cc - w])

    cl = np.clip(c, w, cols - w - 1)
    bl = box(sl, rl, cl)
    bl2 = box(sl2, rl, cl)
    nvar_l = area * bl2 - bl * bl
    l_ok = row_ok[:, None] & col_ok[None, :] & (nvar_l > 1e-9 * (1.0 + bl * bl))

    reg_lo = row0 - w
    reg_rows = band + 2 * w
    for oi in range(n_dy * n_dx):
        ody = dy_min + oi // n_dx
        odx = dx_min + oi % n_dx
        qr = r + ody
        qc = c + odx
        q_ok = (qr >= w) & (qr < rows - w)
        qc_ok = (qc >= w) & (qc < cols - w)
        if not q_ok.any() or not qc_ok.any():
            continue
        qrl = np.clip(qr, w, rows - w - 1)
        qcl = np.clip(qc, w, cols - w - 1)
        br = box(sr, qrl, qcl)
        br2 = box(sr2, qrl, qcl)
        bv = box(sv, qrl, qcl)
        nvar_r = area * br2 - br * br
        ok = (
            l_ok
            & q_ok[:, None] & qc_ok[None, :]
            & (bv == area)
            & (allowed[qrl][:, qcl] != 0)
            & (nvar_r > 1e-9 * (1.0 + br * br))
        )
        if not ok.any():
            continue
        # cross-term product over the band region, zero where shifted out
        prod = np.zeros((reg_rows, cols))
        pr = np.arange(reg_lo, reg_lo + reg_rows)
        src = pr + ody
        keep = (pr >= 0) & (pr < rows) & (src >= 0) & (src < rows)
        clo = max(0, -odx)
        chi = min(cols, cols - odx)
        if keep.any() and clo < chi:
            prod[np.flatnonzero(keep), clo:chi] = (
                left[pr[keep], :][:, clo:chi] * rw0[src[keep], :][:, clo + odx:chi + odx]
            )
        cs = _integral(prod)
        rr_local = r - reg_lo
        cross = box(cs, rr_local, cl)
        num = area * cross - bl * br
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = num / np.sqrt(nvar_l * nvar_r)
        stack[oi] = np.where(ok, np.clip(corr, -1.0, 1.0), _INVALID)


def _fill_stack_impl(left, rw0, sl, sl2, sr, sr2, sv, allowed,
                     row0, row1, dx_min, dy_min, n_dx, n_dy, w, stack):
    rows, cols = left.shape
    band = row1 - row0
    area = float((2 * w + 1) * (2 * w + 1))
    reg_lo = row0 - w
    reg_rows = band + 2 * w

    for oi in prange(n_dy * n_dx):
        ody = dy_min + oi // n_dx
        odx = dx_min + oi % n_dx

        prod = np.zeros((reg_rows, cols))
        for rr in range(reg_rows):
            pr = reg_lo + rr
            src = pr + ody
            if pr < 0 or pr >= rows or src < 0 or src >= rows:
                continue
            clo = -odx if odx < 0 else 0
            chi = cols - odx if odx > 0 else cols
            for cc in range(clo, chi):
                prod[rr, cc] = left[pr, cc] * rw0[src, cc + odx]

        # integral image: cumsum down rows, then across columns
        cs = np.zeros((reg_rows + 1, cols + 1))
        for cc in range(cols):
            acc = 0.0
            for rr in range(reg_rows):
                acc += prod[rr, cc]
                cs[rr + 1, cc + 1] = acc
        for rr in range(1, reg_rows + 1):
            acc = 0.0
            for cc in range(1, cols + 1):
                acc += cs[rr, cc]
                cs[rr, cc] = acc

        for ri in range(band):
            r = row0 + ri
            qr = r + ody
            if r < w or r >= rows - w or qr < w or qr >= rows - w:
                for cc in range(cols):
                    stack[oi, ri, cc] = _INVALID
                continue
            rr_local = r - reg_lo
            for cc in range(cols):
                qc = cc + odx
                if cc < w or cc >= cols - w or qc < w or qc >= cols - w:
                    stack[oi, ri, cc] = _INVALID
                    continue
                if allowed[qr, qc] == 0:
                    stack[oi, ri, cc] = _INVALID
                    continue
                bv = (sv[qr + w + 1, qc + w + 1] - sv[qr - w, qc + w + 1]
                      - sv[qr + w + 1, qc - w] + sv[qr - w, qc - w])
                if bv != area:
                    stack[oi, ri, cc] = _INVALID
                    continue
                bl = (sl[r + w + 1, cc + w + 1] - sl[r - w, cc + w + 1]
                      - sl[r + w + 1, cc - w] + sl[r - w, cc - w])
                bl2 = (sl2[r + w + 1, cc + w + 1] - sl2[r - w, cc + w + 1]
                       - sl2[r + w + 1, cc - w] + sl2[r - w, cc - w])
                nvar_l = area * bl2 - bl * bl
                if nvar_l <= 1e-9 * (1.0 + bl * bl):
                    stack[oi, ri, cc] = _INVALID
                    continue
                br = (sr[qr + w + 1, qc + w + 1] - sr[qr - w, qc + w + 1]
                      - sr[qr + w + 1, qc - w] + sr[qr - w, qc - w])
                br2 = (sr2[qr + w + 1, qc + w + 1] - sr2[qr - w, qc + w + 1]
                       - sr2[qr + w + 1, qc - w] + sr2[qr - w, qc - w])
                nvar_r = area * br2 - br * br
                if nvar_r <= 1e-9 * (1.0 + br * br):
                    stack[oi, ri, cc] = _INVALID
                    continue
                cross = (cs[rr_local + w + 1, qc - odx + w + 1] - cs[rr_local - w, qc - odx + w + 1]
                         - cs[rr_local + w + 1, qc - odx - w] + cs[rr_local - w, qc - odx - w])
                corr = (area * cross - bl * br) / np.sqrt(nvar_l * nvar_r)
                if corr > 1.0:
                    corr = 1.0
                elif corr < -1.0:
                    corr = -1.0
                stack[oi, ri, cc] = corr


_fill_stack_numba = njit(cache=True, parallel=True)(_fill_stack_impl)


def _reduce_stack(stack, dx_min, dy_min, n_dx, n_dy, min_ncc):
    """Shared argmax + parabola refinement over one band's correlation stack."""
    if n_dx < 3 or n_dy < 3:
        # every peak would sit on the search border
        shape = stack.shape[1:]
        return (np.full(shape, _INVALID), np.zeros(shape), np.zeros(shape),
                np.zeros(shape, dtype=bool))
    best = np.argmax(stack, axis=0)
    peak = np.take_along_axis(stack, best[None], axis=0)[0]
    oy, ox = np.divmod(best, n_dx)
    interior = (ox > 0) & (ox < n_dx - 1) & (oy > 0) & (oy < n_dy - 1)
    safe = np.where(interior, best, n_dx + 1)  # any interior flat index
    cxm = np.take_along_axis(stack, (safe - 1)[None], axis=0)[0]
    cxp = np.take_along_axis(stack, (safe + 1)[None], axis=0)[0]
    cym = np.take_along_axis(stack, (safe - n_dx)[None], axis=0)[0]
    cyp = np.take_along_axis(stack, (safe + n_dx)[None], axis=0)[0]
    valid = (
        interior
        & (peak >= min_ncc)
        & (peak > -1.5)
        & (cxm > -1.5) & (cxp > -1.5) & (cym > -1.5) & (cyp > -1.5)
    )
    # a machine-exact peak is the global bound of NCC: the true optimum sits
    # on the integer lattice and the parabola asymmetry is spurious
    exact = peak >= 1.0 - 1e-9

    def parabola(cm, c0, cp):
        den = cm - 2.0 * c0 + cp
        with np.errstate(invalid="ignore", divide="ignore"):
            delta = np.where(den < 0.0, 0.5 * (cm - cp) / den, 0.0)
        return np.where(exact, 0.0, np.clip(delta, -0.5, 0.5))

    dwx = dx_min + ox + parabola(cxm, peak, cxp)
    dwy = dy_min + oy + parabola(cym, peak, cyp)
    return peak, dwx, dwy, valid


def _match_region(left, rw0, rvalid, allowed, row0, row1, params: MatchParams):
    """Correlation search over output rows [row0, row1), full column width."""
    rows, cols = left.shape
    w = params.window_radius
    dx_min, dx_max = params.search_x
    dy_min, dy_max = params.search_y
    n_dx = dx_max - dx_min + 1
    n_dy = dy_max - dy_min + 1

    sl = _integral(left)
    sl2 = _integral(left * left)
    sr = _integral(rw0)
    sr2 = _integral(rw0 * rw0)
    sv = _integral(rvalid.astype(float))

    fill = _fill_stack_numba if numba_enabled() else _fill_stack_numpy
    out_rows = row1 - row0
    peak = np.full((out_rows, cols), _INVALID)
    dwx = np.zeros((out_rows, cols))
    dwy = np.zeros((out_rows, cols))
    valid = np.zeros((out_rows, cols), dtype=bool)
    # bands anchored to absolute frame rows so a crop run reproduces the
    # full-frame run's summations (and therefore its output) bit-for-bit
    for k in range(row0 // _BAND_ROWS, (row1 + _BAND_ROWS - 1) // _BAND_ROWS):
        b0 = k * _BAND_ROWS
        b1 = min(b0 + _BAND_ROWS, rows)
        stack = np.empty((n_dy * n_dx, b1 - b0, cols))
        fill(left, rw0, sl, sl2, sr, sr2, sv, allowed,
             b0, b1, dx_min, dy_min, n_dx, n_dy, w, stack)
        p, x, y, v = _reduce_stack(stack, dx_min, dy_min, n_dx, n_dy, params.min_ncc)
        lo = max(b0, row0)
        hi = min(b1, row1)
        src = slice(lo - b0, hi - b0)
        dst = slice(lo - row0, hi - row0)
        peak[dst] = p[src]
        dwx[dst] = x[src]
        dwy[dst] = y[src]
        valid[dst] = v[src]
    return peak, dwx, dwy, valid


def _allowed_mask(shape, aff, crop, w):
    """Candidate-centre admissibility from the right-image crop window."""
    rows, cols = shape
    if crop is None:
        return np.ones((rows, cols), dtype=np.uint8)
    x0, y0, wd, ht = crop
    margin = w + 1
    y, x = np.mgrid[0:rows, 0:cols].astype(float)
    if aff is None:
        mx, my = x, y
    else:
        mx, my = apply_affine(aff, x, y)
    ok = (
        (mx >= x0 + margin) & (mx <= x0 + wd - 1 - margin)
        & (my >= y0 + margin) & (my <= y0 + ht - 1 - margin)
    )
    return ok.astype(np.uint8)


def _directional_match(img_a, img_b, params: MatchParams, aff, crop_rows, right_crop):
    """One matching direction; returns full-width rows [crop_rows) results."""
    left = img_a
    if aff is None:
        rw = img_b.copy()
    else:
        rw = _warp_affine(img_b, aff)
    rvalid = np.isfinite(rw).astype(np.uint8)
    rw0 = np.where(rvalid != 0, rw, 0.0)
    allowed = _allowed_mask(left.shape, aff, right_crop, params.window_radius)
    return _match_region(left, rw0, rvalid, allowed, crop_rows[0], crop_rows[1], params)


def match_dense(
    img1: RasterImage,
    img2: RasterImage,
    params: MatchParams | None = None,
    prealign: np.ndarray | None = None,
    lr_check: bool = True,
) -> DisparityMap:
    """Dense displacement field img1 -> img2 with left-right verification.

    Poor texture, search-border peaks and inconsistent reverse matches all
    yield invalid pixels rather than errors.
    """
    params = params if params is not None else MatchParams()
    left = img1.values
    right = img2.values
    rows, cols = left.shape
    if right.shape != left.shape:
        raise DomainError("stereo images must share dimensions")

    crop = params.left_crop if params.left_crop is not None else (0, 0, cols, rows)
    cx, cy, cw, ch = crop
    if cx < 0 or cy < 0 or cx + cw > cols or cy + ch > rows:
        raise DomainError("left crop exceeds image bounds")
    if params.right_crop is not None:
        rx, ry, rw_, rh = params.right_crop
        if rx < 0 or ry < 0 or rx + rw_ > cols or ry + rh > rows:
            raise DomainError("right crop exceeds image bounds")

    aff = None if prealign is None else np.asarray(prealign, dtype=float).reshape(2, 3)

    _, dwx, dwy, valid = _directional_match(
        left, right, params, aff, (cy, cy + ch), params.right_crop
    )

    # total disparity in full-frame coordinates
    y, x = np.mgrid[cy:cy + ch, 0:cols].astype(float)
    if aff is None:
        dx_tot = dwx
        dy_tot = dwy
    else:
        mx, my = apply_affine(aff, x, y)
        lin = aff[:, :2]
        dx_tot = mx - x + lin[0, 0] * dwx + lin[0, 1] * dwy
        dy_tot = my - y + lin[1, 0] * dwx + lin[1, 1] * dwy

    if lr_check and valid.any():
        rev_params = MatchParams(
            window_radius=params.window_radius,
            search_x=(-params.search_x[1], -params.search_x[0]),
            search_y=(-params.search_y[1], -params.search_y[0]),
            min_ncc=params.min_ncc,
        )
        rev_aff = None if aff is None else invert_affine(aff)
        rev_rows = (0, rows) if params.right_crop is None else (
            params.right_crop[1], params.right_crop[1] + params.right_crop[3]
        )
        _, rwx, rwy, rvalidmap = _directional_match(
            right, left, rev_params, rev_aff, rev_rows, None
        )
        ry, rx = np.mgrid[rev_rows[0]:rev_rows[1], 0:cols].astype(float)
        if rev_aff is None:
            rdx = rwx
            rdy = rwy
        else:
            rmx, rmy = apply_affine(rev_aff, rx, ry)
            rlin = rev_aff[:, :2]
            rdx = rmx - rx + rlin[0, 0] * rwx + rlin[0, 1] * rwy
            rdy = rmy - ry + rlin[1, 0] * rwx + rlin[1, 1] * rwy

        qx = np.rint(x + dx_tot).astype(np.int64)
        qy = np.rint(y + dy_tot).astype(np.int64)
        in_rev = (
            (qx >= 0) & (qx < cols)
            & (qy >= rev_rows[0]) & (qy < rev_rows[1])
        )
        qxc = np.clip(qx, 0, cols - 1)
        qyc = np.clip(qy - rev_rows[0], 0, rev_rows[1] - rev_rows[0] - 1)
        consistent = (
            in_rev
            & rvalidmap[qyc, qxc]
            & (np.hypot(dx_tot + rdx[qyc, qxc], dy_tot + rdy[qyc, qxc]) <= 1.0)
        )
        valid = valid & consistent

    dx_out = np.where(valid, dx_tot, 0.0)[:, cx:cx + cw]
    dy_out = np.where(valid, dy_tot, 0.0)[:, cx:cx + cw]
    return DisparityMap(dx_out, dy_out, valid[:, cx:cx + cw], origin_col=cx, origin_row=cy)


# ---------------------------------------------------------------------------
# disparity file format (grid-style header + dx / dy / valid planes)
# ---------------------------------------------------------------------------

def write_disparity(disp: DisparityMap, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"ncols {disp.n_cols}\n")
        fh.write(f"nrows {disp.n_rows}\n")
        fh.write(f"xllcorner {disp.origin_col}\n")
        fh.write(f"yllcorner {disp.origin_row}\n")
        fh.write("cellsize 1\n")
        fh.write("nodata_value 0\n")
        for plane in (disp.dx, disp.dy):
            for row in plane:
                fh.write(" ".join(_fmt(v) for v in row))
                fh.write("\n")
        for row in disp.valid:
            fh.write(" ".join("1" if v else "0" for v in row))
            fh.write("\n")


def read_disparity(path) -> DisparityMap:
    tokens = Path(path).read_text().split()
    if len(tokens) < 12:
        raise FormatError(f"{path}: truncated disparity header")
    header = {tokens[2 * k].lower(): tokens[2 * k + 1] for k in range(6)}
    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
        origin_col = int(float(header["xllcorner"]))
        origin_row = int(float(header["yllcorner"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad disparity header ({exc})") from None
    body = tokens[12:]
    if len(body) != 3 * ncols * nrows:
        raise FormatError(f"{path}: expected {3 * ncols * nrows} values, found {len(body)}")
    plane = ncols * nrows
    dx = np.array(body[:plane], dtype=float).reshape(nrows, ncols)
    dy = np.array(body[plane:2 * plane], dtype=float).reshape(nrows, ncols)
    valid = np.array(body[2 * plane:], dtype=float).reshape(nrows, ncols) != 0
    return DisparityMap(dx, dy, valid, origin_col=origin_col, origin_row=origin_row)
