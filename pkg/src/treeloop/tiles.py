"""Tiling, the on-disk tile store, and the per-tile XY grid index.

A tile is a square, axis-aligned cut of the cloud. Assignment uses half-open
intervals, floor((x - minx) / size): a point sitting exactly on an upper
boundary belongs to the next tile, so the tiles partition the cloud.

Tile file layout (little-endian): magic "TRLT", version u32 = 1, field bitmask
u32 (bit0 intensity, bit1 rgb), point count u64, then columnar blocks
x f64[n], y f64[n], z f64[n], hag f32[n], optional intensity f32[n],
optional rgb u8[3n]. ``manifest.json`` next to the tile files records bounds,
CRS and counts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud

MAGIC = b"TRLT"
VERSION = 1
FLAG_INTENSITY = 1
FLAG_RGB = 2


class TileFormatError(ValueError):
    """Raised for corrupt or unsupported tile files."""


@dataclass
class Tile:
    """One square tile of points plus its uniform XY grid index (1 m cells)."""

    origin_x: float
    origin_y: float
    size: float
    points: PointCloud
    ix: int = 0
    iy: int = 0
    _index: "GridIndex | None" = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def name(self) -> str:
        return f"t_{self.ix}_{self.iy}"

    @property
    def index(self) -> "GridIndex":
        if self._index is None:
            self._index = GridIndex(self.points.x, self.points.y,
                                    self.origin_x, self.origin_y, self.size)
        return self._index

    def invalidate_index(self) -> None:
        self._index = None


class GridIndex:
    """Uniform 2D grid over XY binning point positions, cell 1 m by default.

    Cells store point indices in ascending order; queries return candidate
    indices from the cell neighborhood covering the requested radius.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, origin_x: float,
                 origin_y: float, size: float, cell: float = 1.0):
        self.cell = float(cell)
        self.origin_x = float(origin_x)
        self.origin_y = float(origin_y)
        self.ncells = max(1, int(np.ceil(size / cell)))
        cx = np.clip(((x - origin_x) / cell).astype(np.int64), 0, self.ncells - 1)
        cy = np.clip(((y - origin_y) / cell).astype(np.int64), 0, self.ncells - 1)
        self.cell_of_point = cx * self.ncells + cy
        order = np.argsort(self.cell_of_point, kind="stable")
        self._sorted = order
        self._starts = np.searchsorted(self.cell_of_point[order],
                                       np.arange(self.ncells * self.ncells + 1))

    def cell_points(self, cx: int, cy: int) -> np.ndarray:
        if not (0 <= cx < self.ncells and 0 <= cy < self.ncells):
            return np.empty(0, dtype=np.int64)
        key = cx * self.ncells + cy
        return self._sorted[self._starts[key]:self._starts[key + 1]]

    def neighborhood(self, x: float, y: float, radius: float) -> np.ndarray:
        """Indices of all points in cells overlapping the disc (candidates only)."""
        r = int(np.ceil(radius / self.cell))
        cx = int((x - self.origin_x) / self.cell)
        cy = int((y - self.origin_y) / self.cell)
        chunks = [self.cell_points(i, j)
                  for i in range(cx - r, cx + r + 1)
                  for j in range(cy - r, cy + r + 1)]
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks)

    def occupied_cells(self) -> np.ndarray:
        keys = np.flatnonzero(np.diff(self._starts) > 0)
        return keys


def build_tiles(cloud: PointCloud, tile_size: float = 100.0) -> list[Tile]:
    """Partition a cloud into square tiles (half-open intervals, origin at min)."""
    if len(cloud) == 0:
        raise ValueError("cannot tile an empty cloud")
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    minx = float(cloud.x.min())
    miny = float(cloud.y.min())
    ix = np.floor((cloud.x - minx) / tile_size).astype(np.int64)
    iy = np.floor((cloud.y - miny) / tile_size).astype(np.int64)
    tiles = []
    # Unique (ix, iy) pairs in deterministic order.
    pairs = np.unique(np.column_stack([ix, iy]), axis=0)
    for tx, ty in pairs:
        mask = (ix == tx) & (iy == ty)
        idx = np.flatnonzero(mask)
        tiles.append(Tile(
            origin_x=minx + tx * tile_size,
            origin_y=miny + ty * tile_size,
            size=tile_size,
            points=cloud.take(idx),
            ix=int(tx), iy=int(ty),
        ))
    return tiles


def write_tile(tile: Tile, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = tile.points
    flags = 0
    if p.intensity is not None:
        flags |= FLAG_INTENSITY
    if p.rgb is not None:
        flags |= FLAG_RGB
    n = len(p)
    path = directory / f"{tile.name}.bin"
    tmp = path.with_suffix(".bin.tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, flags))
        f.write(struct.pack("<Q", n))
        f.write(np.ascontiguousarray(p.x, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(p.y, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(p.z, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(p.hag, dtype="<f4").tobytes())
        if p.intensity is not None:
            f.write(np.ascontiguousarray(p.intensity, dtype="<f4").tobytes())
        if p.rgb is not None:
            f.write(np.ascontiguousarray(p.rgb, dtype=np.uint8).tobytes())
    tmp.replace(path)
    return path


def read_tile(path: str | Path, origin_x: float | None = None,
              origin_y: float | None = None, size: float = 100.0) -> Tile:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise TileFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, flags = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise TileFormatError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack_from("<Q", raw, 12)
    offset = 20
    expect = n * (8 * 3 + 4)
    if flags & FLAG_INTENSITY:
        expect += n * 4
    if flags & FLAG_RGB:
        expect += n * 3
    if len(raw) - offset != expect:
        raise TileFormatError(f"{path}: truncated tile file")

    def block(dtype: str, count: int) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr.copy()

    x = block("<f8", n)
    y = block("<f8", n)
    z = block("<f8", n)
    hag = block("<f4", n)
    intensity = block("<f4", n) if flags & FLAG_INTENSITY else None
    rgb = block("u1", 3 * n).reshape(-1, 3) if flags & FLAG_RGB else None

    stem = path.stem
    try:
        _, ix_s, iy_s = stem.split("_")
        ix, iy = int(ix_s), int(iy_s)
    except ValueError:
        ix = iy = 0
    if origin_x is None:
        origin_x = float(x.min()) if n else 0.0
    if origin_y is None:
        origin_y = float(y.min()) if n else 0.0
    cloud = PointCloud(x=x, y=y, z=z, hag=hag, intensity=intensity, rgb=rgb)
    return Tile(origin_x=origin_x, origin_y=origin_y, size=size,
                points=cloud, ix=ix, iy=iy)


def write_tilestore(tiles: list[Tile], directory: str | Path,
                    crs: str = "") -> Path:
    """Write all tiles plus manifest.json; returns the store directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for tile in tiles:
        write_tile(tile, directory)
        p = tile.points
        entries.append({
            "name": tile.name,
            "ix": tile.ix, "iy": tile.iy,
            "origin_x": tile.origin_x, "origin_y": tile.origin_y,
            "size": tile.size,
            "count": len(tile),
            "bounds": list(p.bounds) if len(p) else None,
        })
    manifest = {
        "crs": crs,
        "tile_count": len(tiles),
        "point_count": int(sum(len(t) for t in tiles)),
        "tiles": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def read_tilestore(directory: str | Path) -> list[Tile]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise TileFormatError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    tiles = []
    for entry in manifest["tiles"]:
        tile = read_tile(directory / f"{entry['name']}.bin",
                         origin_x=entry["origin_x"], origin_y=entry["origin_y"],
                         size=entry["size"])
        tile.ix, tile.iy = entry["ix"], entry["iy"]
        tiles.append(tile)
    return tiles
