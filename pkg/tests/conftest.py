import numpy as np
import pytest

from treeloop.cloud import PointCloud
from treeloop.terrain import estimate_ground, normalize_heights
from treeloop.tiles import Tile


def cone_points(cx, cy, apex, radius=3.0, base=0.8, density=38.0, rng=None,
                ground_z=0.0):
    """Sample one cone crown the way the synthetic generator does: envelope
    returns at the scan density plus one exact apex return."""
    rng = rng or np.random.default_rng(0)
    n = max(8, int(round(density * np.pi * radius ** 2)))
    d = radius * np.sqrt(rng.uniform(0, 1, n))
    theta = rng.uniform(0, 2 * np.pi, n)
    x = cx + d * np.cos(theta)
    y = cy + d * np.sin(theta)
    z = ground_z + apex - (apex - base) * d / radius + rng.normal(0, 0.03, n)
    x = np.append(x, cx)
    y = np.append(y, cy)
    z = np.append(z, ground_z + apex)
    return x, y, z


def flat_tile_with_cones(cones, extent=40.0, ground_density=8.0, seed=0):
    """A normalized tile: flat ground plus the given (cx, cy, apex[, radius])
    cones. Returns (tile, list of per-cone point index arrays)."""
    rng = np.random.default_rng(seed)
    n_ground = int(ground_density * extent * extent)
    gx = rng.uniform(0, extent, n_ground)
    gy = rng.uniform(0, extent, n_ground)
    gz = rng.normal(0, 0.02, n_ground)
    xs, ys, zs, owners = [gx], [gy], [gz], [np.zeros(n_ground, dtype=int)]
    for k, cone in enumerate(cones, start=1):
        cx, cy, apex = cone[:3]
        radius = cone[3] if len(cone) > 3 else 3.0
        x, y, z = cone_points(cx, cy, apex, radius=radius, rng=rng)
        xs.append(x)
        ys.append(y)
        zs.append(z)
        owners.append(np.full(x.size, k, dtype=int))
    cloud = PointCloud(x=np.concatenate(xs), y=np.concatenate(ys),
                       z=np.concatenate(zs))
    tile = Tile(origin_x=0.0, origin_y=0.0, size=extent, points=cloud)
    normalize_heights(tile, estimate_ground(tile))
    owner = np.concatenate(owners)
    return tile, [np.flatnonzero(owner == k) for k in range(1, len(cones) + 1)]


@pytest.fixture
def rng():
    return np.random.default_rng(42)
