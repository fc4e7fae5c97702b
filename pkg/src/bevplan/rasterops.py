"""Low-level binary raster primitives on continuous pixel coordinates.

Convention: cell (col i, row j) has its center at continuous coordinates
(i, j) and covers the half-open square [i-0.5, i+0.5) x [j-0.5, j+0.5).
Coverage is binary: a cell is painted iff its center satisfies the
geometric predicate (inside polygon, within stroke distance, ...), so a
brute-force point-test oracle reproduces every fill exactly.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .core import GridSpec


@lru_cache(maxsize=8)
def pixel_mesh(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(cols, rows) float64 meshgrids of cell-center coordinates."""
    ci, rj = np.meshgrid(np.arange(grid.width_px, dtype=float),
                         np.arange(grid.height_px, dtype=float))
    ci.setflags(write=False)
    rj.setflags(write=False)
    return ci, rj


def polygon_rows_spans(poly: np.ndarray, height: int):
    """Scanline crossings of a polygon with each row's center line.

    Yields (row, (x_enter, x_exit) pairs) using the half-open rule
    y_lo <= row < y_hi per edge, which handles shared vertices once.
    """
    poly = np.asarray(poly, dtype=float)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ymin = np.minimum(y0, y1)
    ymax = np.maximum(y0, y1)
    r_lo = max(0, int(np.ceil(ymin.min())))
    r_hi = min(height - 1, int(np.floor(ymax.max())))
    for j in range(r_lo, r_hi + 1):
        crossing = ((y0 <= j) & (y1 > j)) | ((y1 <= j) & (y0 > j))
        if not crossing.any():
            continue
        idx = np.nonzero(crossing)[0]
        xs = x0[idx] + (j - y0[idx]) * (x1[idx] - x0[idx]) / (y1[idx] - y0[idx])
        xs = np.sort(xs)
        yield j, xs


def fill_polygon(img: np.ndarray, poly: np.ndarray, value: float) -> None:
    """Max-composite a filled polygon (pixel coordinates) onto img."""
    h, w = img.shape
    for j, xs in polygon_rows_spans(poly, h):
        for a, b in zip(xs[0::2], xs[1::2]):
            lo = max(0, int(np.ceil(a)))
            hi = min(w - 1, int(np.ceil(b)) - 1)
            if hi >= lo:
                row = img[j, lo:hi + 1]
                np.maximum(row, value, out=row)


def point_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Crossing-number inside test for (N, 2) points (same half-open rule)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    poly = np.asarray(poly, dtype=float)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]
    crossing = ((y0[None, :] <= py) & (y1[None, :] > py)) | \
               ((y1[None, :] <= py) & (y0[None, :] > py))
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = x0[None, :] + (py - y0[None, :]) * (x1 - x0)[None, :] / (y1 - y0)[None, :]
    hits = crossing & (xs > px)
    return hits.sum(axis=1) % 2 == 1


def segment_distance(pts: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """(N, S) distances from points to segments ((S, 2, 2) array)."""
    p = np.asarray(pts, dtype=float)[:, None, :]
    a = np.asarray(segs, dtype=float)[None, :, 0, :]
    b = np.asarray(segs, dtype=float)[None, :, 1, :]
    ab = b - a
    denom = (ab * ab).sum(-1)
    denom = np.where(denom < 1e-18, 1.0, denom)
    t = ((p - a) * ab).sum(-1) / denom
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[..., None] * ab
    d = p - proj
    return np.sqrt((d * d).sum(-1))


def polyline_segments(pts: np.ndarray) -> np.ndarray:
    """(K-1, 2, 2) consecutive segments of a polyline."""
    pts = np.asarray(pts, dtype=float)
    return np.stack([pts[:-1], pts[1:]], axis=1)


def polyline_distance_station(query: np.ndarray, polyline: np.ndarray
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Distance to a polyline and arc-length station of the projection.

    query is (N, 2); returns (dist (N,), station (N,)).
    """
    pts = np.asarray(query, dtype=float)
    pl = np.asarray(polyline, dtype=float)
    segs = polyline_segments(pl)
    seg_len = np.hypot(*(pl[1:] - pl[:-1]).T)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    p = pts[:, None, :]
    a = segs[None, :, 0, :]
    ab = (segs[:, 1, :] - segs[:, 0, :])[None, :, :]
    denom = (ab * ab).sum(-1)
    denom = np.where(denom < 1e-18, 1.0, denom)
    t = np.clip(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    d = np.sqrt(((p - proj) ** 2).sum(-1))
    k = np.argmin(d, axis=1)
    n = np.arange(len(pts))
    station = cum[k] + t[n, k] * seg_len[k]
    return d[n, k], station


def stroke_polyline(img: np.ndarray, polyline_px: np.ndarray, halfwidth_px: float,
                    value: float) -> None:
    """Max-composite all cells whose center is within halfwidth of the line."""
    if len(polyline_px) < 2:
        return
    _stroke_mask_apply(img, polyline_px, lambda d: d <= halfwidth_px, value,
                       reach_px=halfwidth_px + 1.0)


def stroke_polyline_band(img: np.ndarray, polyline_px: np.ndarray, lo_px: float,
                         hi_px: float, value: float) -> None:
    """Max-composite the annulus lo <= distance <= hi around a polyline."""
    if len(polyline_px) < 2:
        return
    _stroke_mask_apply(img, polyline_px, lambda d: (d >= lo_px) & (d <= hi_px),
                       value, reach_px=hi_px + 1.0)


def _stroke_mask_apply(img, polyline_px, predicate, value, reach_px) -> None:
    """Evaluate a distance predicate on the bbox window the stroke can reach."""
    h, w = img.shape
    pl = np.asarray(polyline_px, dtype=float)
    lo_i = max(0, int(np.ceil(pl[:, 0].min() - reach_px)))
    hi_i = min(w - 1, int(np.floor(pl[:, 0].max() + reach_px)))
    lo_j = max(0, int(np.ceil(pl[:, 1].min() - reach_px)))
    hi_j = min(h - 1, int(np.floor(pl[:, 1].max() + reach_px)))
    if lo_i > hi_i or lo_j > hi_j:
        return
    segs = polyline_segments(pl)
    # cull segments entirely outside the window (+reach)
    smin = segs.min(axis=1)
    smax = segs.max(axis=1)
    keep = ~((smax[:, 0] < lo_i - reach_px) | (smin[:, 0] > hi_i + reach_px) |
             (smax[:, 1] < lo_j - reach_px) | (smin[:, 1] > hi_j + reach_px))
    segs = segs[keep]
    if len(segs) == 0:
        return
    mesh_c, mesh_r = np.meshgrid(np.arange(lo_i, hi_i + 1, dtype=float),
                                 np.arange(lo_j, hi_j + 1, dtype=float))
    pts = np.stack([mesh_c.ravel(), mesh_r.ravel()], axis=-1)
    d = segment_distance(pts, segs).min(axis=1).reshape(mesh_c.shape)
    sel = predicate(d)
    window = img[lo_j:hi_j + 1, lo_i:hi_i + 1]
    np.maximum(window, np.where(sel, value, 0.0), out=window)


def fill_disc(img: np.ndarray, center_px, radius_px: float, value: float) -> None:
    h, w = img.shape
    cx, cy = float(center_px[0]), float(center_px[1])
    lo_j = max(0, int(np.ceil(cy - radius_px)))
    hi_j = min(h - 1, int(np.floor(cy + radius_px)))
    for j in range(lo_j, hi_j + 1):
        dy2 = (j - cy) ** 2
        span = radius_px * radius_px - dy2
        if span < 0:
            continue
        half = np.sqrt(span)
        lo = max(0, int(np.ceil(cx - half)))
        hi = min(w - 1, int(np.floor(cx + half)))
        if hi >= lo:
            row = img[j, lo:hi + 1]
            np.maximum(row, value, out=row)


def draw_point(img: np.ndarray, pt_px, value: float) -> None:
    """Paint the single cell containing the point (max-composite)."""
    h, w = img.shape
    i = int(np.floor(pt_px[0] + 0.5))
    j = int(np.floor(pt_px[1] + 0.5))
    if 0 <= i < w and 0 <= j < h:
        img[j, i] = max(img[j, i], value)


def polyline_bbox_hits_grid(polyline_px: np.ndarray, grid: GridSpec,
                            pad_px: float) -> bool:
    pl = np.asarray(polyline_px, dtype=float)
    return not (pl[:, 0].max() < -pad_px or pl[:, 0].min() > grid.width_px - 1 + pad_px
                or pl[:, 1].max() < -pad_px or pl[:, 1].min() > grid.height_px - 1 + pad_px)
