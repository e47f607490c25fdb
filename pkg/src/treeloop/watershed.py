"""Closed-form initial crown segmentation: smooth CHM, seed on maxima, flood.

The flood is a marker-controlled priority queue over the negated CHM: seeds
enter first, cells are popped in decreasing CHM order and claim their
unlabeled neighbors. Ties resolve by queue entry order, which makes the whole
pass deterministic. Cells below the background threshold never enter the
queue, so ground stays unlabeled.
"""

from __future__ import annotations

import heapq

import numpy as np

from .clusters import ClusterSet, make_cluster
from .terrain import Raster
from .tiles import Tile


def smooth_chm(chm: Raster, sigma: float = 1.0) -> Raster:
    """Gaussian blur of the CHM, kernel truncated at 3 sigma, reflect edges.

    ``sigma`` is in meters and is converted to cells by the raster pitch.
    sigma = 0 returns a copy of the input.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Raster(chm.origin_x, chm.origin_y, chm.pitch, chm.values.copy())
    sigma_cells = sigma / chm.pitch
    radius = max(1, int(np.ceil(3.0 * sigma_cells)))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma_cells) ** 2)
    kernel /= kernel.sum()

    out = _reflect_conv1d(chm.values.astype(np.float64), kernel, axis=0)
    out = _reflect_conv1d(out, kernel, axis=1)
    return Raster(chm.origin_x, chm.origin_y, chm.pitch, out.astype(np.float32))


def _reflect_conv1d(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    n = values.shape[axis]
    pad = min(radius, n - 1) if n > 1 else 0
    padded = np.pad(values, [(radius, radius) if a == axis else (0, 0)
                             for a in range(values.ndim)],
                    mode="reflect" if pad else "edge")
    out = np.zeros_like(values, dtype=np.float64)
    for k, w in enumerate(kernel):
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(k, k + n)
        out += w * padded[tuple(sl)]
    return out


def detect_maxima(chm: Raster, min_height: float = 2.0,
                  radius: float = 2.0) -> list[tuple[int, int]]:
    """Seed cells: strict maxima within a Euclidean disc, at least min_height.

    A cell is a seed if nothing in its disc is higher, and on plateaus only
    the cell with the lowest (row, col) survives. Returned in (row, col) order.
    """
    if radius < chm.pitch:
        raise ValueError("radius must be at least one pitch")
    v = chm.values
    r_cells = int(np.floor(radius / chm.pitch))
    disc = [(dx, dy)
            for dx in range(-r_cells, r_cells + 1)
            for dy in range(-r_cells, r_cells + 1)
            if (dx, dy) != (0, 0) and dx * dx + dy * dy <= r_cells * r_cells]

    # Disc maximum via shifted-array accumulation.
    neigh_max = np.full_like(v, -np.inf)
    w, h = v.shape
    for dx, dy in disc:
        xs = slice(max(0, -dx), w - max(0, dx))
        ys = slice(max(0, -dy), h - max(0, dy))
        xd = slice(max(0, dx), w - max(0, -dx))
        yd = slice(max(0, dy), h - max(0, -dy))
        dst = neigh_max[xd, yd]
        np.maximum(dst, v[xs, ys], out=dst)

    seeds: list[tuple[int, int]] = []
    for cx, cy in zip(*np.nonzero(v >= min_height)):
        val = v[cx, cy]
        if val < neigh_max[cx, cy]:
            continue
        if val > neigh_max[cx, cy]:
            seeds.append((int(cx), int(cy)))
            continue
        # Plateau: survive only if no equal cell in the disc precedes us.
        preceded = False
        for dx, dy in disc:
            nx, ny = cx + dx, cy + dy
            if 0 <= nx < w and 0 <= ny < h and v[nx, ny] == val and (nx, ny) < (cx, cy):
                preceded = True
                break
        if not preceded:
            seeds.append((int(cx), int(cy)))
    seeds.sort()
    return seeds


def flood_labels(chm: Raster, seeds: list[tuple[int, int]],
                 background: float = 0.5) -> np.ndarray:
    """Label raster cells by priority flood from the seeds.

    Returns an int32 grid: 0 = background/unlabeled, k = (k-1)-th seed's basin.
    """
    v = chm.values
    w, h = v.shape
    labels = np.zeros((w, h), dtype=np.int32)
    if not seeds:
        return labels
    heap: list[tuple[float, int, int, int, int]] = []
    counter = 0
    for label, (sx, sy) in enumerate(seeds, start=1):
        if v[sx, sy] < background:
            continue
        heapq.heappush(heap, (-float(v[sx, sy]), counter, sx, sy, label))
        counter += 1

    neighbors = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    while heap:
        _, _, cx, cy, label = heapq.heappop(heap)
        if labels[cx, cy] != 0:
            continue
        labels[cx, cy] = label
        for dx, dy in neighbors:
            nx, ny = cx + dx, cy + dy
            if 0 <= nx < w and 0 <= ny < h and labels[nx, ny] == 0 \
                    and v[nx, ny] >= background:
                heapq.heappush(heap, (-float(v[nx, ny]), counter, nx, ny, label))
                counter += 1
    return labels


def watershed_clusters(tile: Tile, chm: Raster, seeds: list[tuple[int, int]],
                       background: float = 0.5, start_id: int = 1) -> ClusterSet:
    """Assign points to crown clusters through the flooded CHM label grid.

    A point joins the cluster of its cell when the cell is labeled and the
    point's hag clears the background threshold. Seeds that end up with no
    points produce no cluster; surviving clusters are numbered consecutively
    from start_id in seed order (pass a running offset to keep ids globally
    unique across tiles).
    """
    p = tile.points
    cs = ClusterSet(len(tile))
    labels = flood_labels(chm, seeds, background=background)
    if labels.max() == 0:
        return cs
    cx, cy = chm.cell_of(p.x, p.y)
    point_label = labels[cx, cy]
    point_label[p.hag < background] = 0

    next_id = start_id
    for seed_label in range(1, len(seeds) + 1):
        idx = np.flatnonzero(point_label == seed_label)
        if idx.size == 0:
            continue
        cs.add(make_cluster(tile, next_id, idx, source="watershed"))
        next_id += 1
    return cs
