"""Per-point geometric features for the reference segmentation backend.

Neighborhoods come from the tile's 1 m XY grid index: candidates are gathered
from a cell window wide enough to cover the query radius, then filtered by
true 3D distance. Everything is computed cell-batch at a time so the heavy
parts stay inside numpy.

Features per point: height above ground, neighbor count within 1 m, vertical
extent of the 20 nearest neighbors, and linearity / planarity / sphericity
from the eigenvalues of the neighborhood covariance (lambda1 >= lambda2 >=
lambda3, each feature in [0, 1]). Points with fewer than 3 neighbors get zero
shape features and zero extent.
"""

from __future__ import annotations

import numpy as np

from .tiles import Tile

N_FEATURES = 6
K_NEIGHBORS = 20
DENSITY_RADIUS = 1.0


def extract_features(tile: Tile) -> np.ndarray:
    """(n, 6) f32 feature matrix: hag, density, extent, linear, planar, spherical."""
    p = tile.points
    n = len(tile)
    if np.isnan(p.hag).any():
        raise ValueError("heights must be normalized before feature extraction")
    feats = np.zeros((n, N_FEATURES), dtype=np.float32)
    feats[:, 0] = p.hag
    if n == 0:
        return feats

    index = tile.index
    xyz = np.column_stack([p.x, p.y, p.z])
    ncells = index.ncells
    # Window of +-2 cells holds the 20-NN at workable densities; cells are
    # widened per batch when too sparse.
    base_window = 2

    occupied = index.occupied_cells()
    for key in occupied:
        cx, cy = int(key) // ncells, int(key) % ncells
        members = index.cell_points(cx, cy)
        window = base_window
        while True:
            chunks = [index.cell_points(i, j)
                      for i in range(cx - window, cx + window + 1)
                      for j in range(cy - window, cy + window + 1)]
            candidates = np.concatenate([c for c in chunks if c.size]) \
                if any(c.size for c in chunks) else members
            if candidates.size >= K_NEIGHBORS + 1 or 2 * window >= ncells:
                break
            window += 2

        a = xyz[members]                       # (k, 3)
        b = xyz[candidates]                    # (m, 3)
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)

        feats[members, 1] = (d2 <= DENSITY_RADIUS ** 2).sum(axis=1)

        k_take = min(K_NEIGHBORS + 1, candidates.size)
        nearest = np.argpartition(d2, k_take - 1, axis=1)[:, :k_take]
        neigh_idx = candidates[nearest]                       # (k, k_take)
        # Exclude self from the neighbor count used for the sparsity rule.
        n_others = (neigh_idx != members[:, None]).sum(axis=1)

        pts = xyz[neigh_idx]                                  # (k, k_take, 3)
        centered = pts - pts.mean(axis=1, keepdims=True)
        cov = np.einsum("kni,knj->kij", centered, centered) / k_take
        eig = np.linalg.eigvalsh(cov)                          # ascending
        l1 = eig[:, 2]
        l2 = eig[:, 1]
        l3 = eig[:, 0]
        ok = (l1 > 1e-12) & (n_others >= 3)
        with np.errstate(invalid="ignore", divide="ignore"):
            feats[members, 3] = np.where(ok, (l1 - l2) / l1, 0.0)
            feats[members, 4] = np.where(ok, (l2 - l3) / l1, 0.0)
            feats[members, 5] = np.where(ok, l3 / l1, 0.0)

        zmax = pts[:, :, 2].max(axis=1)
        zmin = pts[:, :, 2].min(axis=1)
        feats[members, 2] = np.where(n_others >= 3, zmax - zmin, 0.0)

    np.nan_to_num(feats, copy=False)
    return feats
