"""Ground estimation, height normalization and CHM rasterization.

The ground model is deliberately simple: per-cell minimum z on a coarse grid,
a 3x3 median filter to knock out low outliers, nearest-neighbor fill for empty
cells, then bilinear sampling when normalizing point heights. It is adequate
for synthetic scenes and moderate terrain and is isolated here so a better
model can be dropped in later.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cloud import HAG_FLOOR
from .tiles import Tile


@dataclass
class Raster:
    """Single-band f32 raster; NaN marks cells without data."""

    origin_x: float
    origin_y: float
    pitch: float
    values: np.ndarray  # (width, height), axis 0 = x, axis 1 = y

    def __post_init__(self) -> None:
        if self.pitch <= 0:
            raise ValueError("pitch must be positive")
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or 0 in self.values.shape:
            raise ValueError("raster must be 2D and non-empty")

    @property
    def width(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    def cell_of(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cx = np.clip(((x - self.origin_x) / self.pitch).astype(np.int64), 0, self.width - 1)
        cy = np.clip(((y - self.origin_y) / self.pitch).astype(np.int64), 0, self.height - 1)
        return cx, cy

    def cell_center(self, cx: np.ndarray, cy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (self.origin_x + (np.asarray(cx) + 0.5) * self.pitch,
                self.origin_y + (np.asarray(cy) + 0.5) * self.pitch)

    def sample_bilinear(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Bilinear interpolation between cell centers.

        Beyond the outermost centers (at most half a cell for in-tile
        points), the boundary cell pair extrapolates linearly; clamping there
        would flatten sloped terrain at the tile rim.
        """
        gx = (np.asarray(x) - self.origin_x) / self.pitch - 0.5
        gy = (np.asarray(y) - self.origin_y) / self.pitch - 0.5
        x0 = np.clip(np.floor(gx).astype(np.int64), 0, max(self.width - 2, 0))
        y0 = np.clip(np.floor(gy).astype(np.int64), 0, max(self.height - 2, 0))
        x1 = np.minimum(x0 + 1, self.width - 1)
        y1 = np.minimum(y0 + 1, self.height - 1)
        fx = gx - x0
        fy = gy - y0
        v = self.values
        return ((v[x0, y0] * (1 - fx) + v[x1, y0] * fx) * (1 - fy)
                + (v[x0, y1] * (1 - fx) + v[x1, y1] * fx) * fy)


def _grid_shape(tile: Tile, cell: float) -> tuple[int, int]:
    n = max(1, int(np.ceil(tile.size / cell)))
    return n, n


OUTLIER_DELTA = 2.0   # min-point rejected when this far from the 3x3 median


def estimate_ground(tile: Tile, cell: float = 2.0) -> Raster:
    """Estimate the terrain surface under a tile.

    Per-cell minimum points anchor the surface. A 3x3 median over the minima
    rejects outliers (a min more than OUTLIER_DELTA from its neighborhood
    median is dropped: below-ground noise, or canopy minima in cells without
    a ground return). The raster is then filled cell by cell with a local
    least-squares plane through the surviving minima, which uses their true
    positions rather than cell centers: a plain min raster reads low by up to
    slope * cell and would fail on steep terrain. Tiles with fewer than 4
    points fall back to a constant raster at the minimum z.
    """
    if len(tile) == 0:
        raise ValueError("cannot estimate ground for an empty tile")
    w, h = _grid_shape(tile, cell)
    p = tile.points

    if len(tile) < 4:
        flat = np.full((w, h), float(p.z.min()), dtype=np.float32)
        return Raster(tile.origin_x, tile.origin_y, cell, flat)

    cx = np.clip(((p.x - tile.origin_x) / cell).astype(np.int64), 0, w - 1)
    cy = np.clip(((p.y - tile.origin_y) / cell).astype(np.int64), 0, h - 1)
    flat_idx = cx * h + cy
    minz = np.full(w * h, np.inf)
    np.minimum.at(minz, flat_idx, p.z)

    # Representative lowest point per cell (first point on ties).
    is_min = p.z == minz[flat_idx]
    min_rows = np.flatnonzero(is_min)
    rep = np.full(w * h, -1, dtype=np.int64)
    rep[flat_idx[min_rows[::-1]]] = min_rows[::-1]

    grid = minz.reshape(w, h)
    grid[np.isinf(grid)] = np.nan
    med = _nanmedian3(grid)
    keep_cell = np.abs(grid - med) <= OUTLIER_DELTA
    keep_cell &= ~np.isnan(grid)

    anchors = rep.reshape(w, h)[keep_cell]
    if anchors.size == 0:
        anchors = rep[rep >= 0]
    ax = p.x[anchors]
    ay = p.y[anchors]
    az = p.z[anchors]
    acx = np.clip(((ax - tile.origin_x) / cell).astype(np.int64), 0, w - 1)
    acy = np.clip(((ay - tile.origin_y) / cell).astype(np.int64), 0, h - 1)

    out = np.empty((w, h), dtype=np.float64)
    centers_x = tile.origin_x + (np.arange(w) + 0.5) * cell
    centers_y = tile.origin_y + (np.arange(h) + 0.5) * cell
    for i in range(w):
        for j in range(h):
            out[i, j] = _fit_plane_at(centers_x[i], centers_y[j], i, j,
                                      ax, ay, az, acx, acy, w, h)
    return Raster(tile.origin_x, tile.origin_y, cell, out.astype(np.float32))


def _fit_plane_at(x0: float, y0: float, ci: int, cj: int,
                  ax, ay, az, acx, acy, w: int, h: int) -> float:
    """Local plane through nearby anchor minima, evaluated at (x0, y0).

    Widens the cell window until at least 3 anchors are found; degenerate
    fits fall back to the anchor mean.
    """
    radius = 3
    while True:
        sel = ((np.abs(acx - ci) <= radius) & (np.abs(acy - cj) <= radius))
        if sel.sum() >= 3 or radius >= max(w, h):
            break
        radius *= 2
    if sel.sum() == 0:
        return float(az.mean())
    if sel.sum() < 3:
        return float(az[sel].mean())
    design = np.column_stack([ax[sel] - x0, ay[sel] - y0, np.ones(sel.sum())])
    coeffs, _, rank, _ = np.linalg.lstsq(design, az[sel], rcond=None)
    if rank < 3:
        return float(az[sel].mean())
    return float(coeffs[2])


def _nanmedian3(grid: np.ndarray) -> np.ndarray:
    """3x3 median ignoring NaNs; cells with no valid neighbor stay NaN."""
    w, h = grid.shape
    stack = np.full((9, w, h), np.nan)
    k = 0
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            src = grid[max(0, -dx):w - max(0, dx), max(0, -dy):h - max(0, dy)]
            stack[k, max(0, dx):w - max(0, -dx), max(0, dy):h - max(0, -dy)] = src
            k += 1
    with warnings.catch_warnings():
        # Cells whose whole neighborhood is empty legitimately yield NaN.
        warnings.simplefilter("ignore", category=RuntimeWarning)
        out = np.nanmedian(stack, axis=0)
    return out


def normalize_heights(tile: Tile, ground: Raster) -> Tile:
    """Fill the hag channel: z minus bilinear ground, clamped at HAG_FLOOR."""
    p = tile.points
    interp = ground.sample_bilinear(p.x, p.y)
    hag = np.maximum(p.z - interp, HAG_FLOOR).astype(np.float32)
    p.hag = hag
    return tile


def rasterize_chm(tile: Tile, pitch: float = 0.5) -> Raster:
    """Canopy height model: per-cell max hag; cells without points read 0."""
    p = tile.points
    if np.isnan(p.hag).any():
        raise ValueError("heights must be normalized before CHM rasterization")
    n = max(1, int(np.ceil(tile.size / pitch)))
    cx = np.clip(((p.x - tile.origin_x) / pitch).astype(np.int64), 0, n - 1)
    cy = np.clip(((p.y - tile.origin_y) / pitch).astype(np.int64), 0, n - 1)
    flat = np.zeros(n * n, dtype=np.float32)
    np.maximum.at(flat, cx * n + cy, np.maximum(p.hag, 0.0).astype(np.float32))
    return Raster(tile.origin_x, tile.origin_y, pitch, flat.reshape(n, n))
