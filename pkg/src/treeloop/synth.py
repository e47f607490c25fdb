"""Synthetic forest scenes with exact ground truth.

The sampling model is a crude single-return airborne scan: shot positions are
uniform over the extent at the requested density, and each shot returns from
the first surface it meets, the crown envelope where one covers the shot,
terrain otherwise. A fraction of crown shots penetrate into the crown volume
or punch through to the ground, which gives crowns the interior texture a
real scanner records. Every tree also returns one exact apex point, so the
canopy model's local maxima sit where the truth says they do.

Trees are cones or ellipsoids placed by dart-throwing with a minimum spacing;
confusers are squat rock blobs and sub-2 m shrubs that carry no instance id.
Everything derives from one seed and is bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import PointCloud
from .clusters import ClusterSet, make_cluster
from .labels import SEM_GROUND, SEM_TREE, LabelMap, save_labels
from .terrain import estimate_ground, normalize_heights
from .tiles import Tile, build_tiles, write_tilestore


class PlacementError(RuntimeError):
    """Dart throwing could not satisfy the spacing constraint."""


@dataclass
class SceneSpec:
    extent: float = 100.0
    slope: float = 0.0                 # dz/dx
    n_trees: int = 60
    min_spacing: float = 4.5           # meters between tree axes
    height_range: tuple[float, float] = (4.0, 14.0)
    radius_range: tuple[float, float] = (1.8, 3.2)
    crown_base: tuple[float, float] = (0.6, 1.5)
    shapes: tuple[str, ...] = ("cone", "ellipsoid")
    n_rocks: int = 6
    n_shrubs: int = 8
    rock_height_range: tuple[float, float] = (0.8, 3.0)
    density: float = 38.0              # pt/m^2
    noise: float = 0.03               # vertical jitter sigma, meters
    penetration: float = 0.25          # crown shots landing inside the crown
    punch_through: float = 0.08        # crown shots reaching the ground
    seed: int = 0

    def __post_init__(self) -> None:
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.min_spacing <= 0:
            raise ValueError("min_spacing must be positive")
        if self.height_range[0] <= 0:
            raise ValueError("tree heights must be positive")


@dataclass
class Crown:
    instance_id: int        # 0 for confusers
    kind: str               # cone | ellipsoid | rock | shrub
    x: float
    y: float
    height: float           # apex height above terrain
    radius: float
    base: float             # crown base height above terrain

    def surface_height(self, d: np.ndarray) -> np.ndarray:
        """Envelope height above terrain at horizontal distance d from the axis."""
        d = np.minimum(d, self.radius)
        if self.kind in ("cone", "shrub"):
            return self.height - (self.height - self.base) * d / self.radius
        # ellipsoid (also rocks): top half of an ellipsoid spanning base..height
        c = (self.height - self.base) / 2.0
        zc = self.base + c
        return zc + c * np.sqrt(np.maximum(0.0, 1.0 - (d / self.radius) ** 2))


@dataclass
class SyntheticScene:
    spec: SceneSpec
    cloud: PointCloud
    instance: np.ndarray            # u32 per point, 0 = no tree
    semantic: np.ndarray            # u8 per point
    trees: list[Crown] = field(default_factory=list)
    confusers: list[Crown] = field(default_factory=list)

    def terrain_z(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.spec.slope * np.asarray(x)


def _place(rng: np.random.Generator, existing: list[tuple[float, float, float]],
           extent: float, margin: float, spacing: float,
           max_tries: int = 4000) -> tuple[float, float]:
    for _ in range(max_tries):
        x = float(rng.uniform(margin, extent - margin))
        y = float(rng.uniform(margin, extent - margin))
        ok = True
        for ex, ey, es in existing:
            need = max(spacing, es)
            if (x - ex) ** 2 + (y - ey) ** 2 < need * need:
                ok = False
                break
        if ok:
            return x, y
    raise PlacementError(
        f"could not place an object with spacing {spacing} in extent {extent}")


def generate_forest(spec: SceneSpec) -> SyntheticScene:
    """Sample a full scene; returns the cloud plus exact per-point truth."""
    rng = np.random.default_rng(spec.seed)
    extent = spec.extent

    trees: list[Crown] = []
    confusers: list[Crown] = []
    placed: list[tuple[float, float, float]] = []

    for i in range(spec.n_trees):
        radius = float(rng.uniform(*spec.radius_range))
        margin = radius + 1.0
        x, y = _place(rng, placed, extent, margin, spec.min_spacing)
        height = float(rng.uniform(*spec.height_range))
        base = float(rng.uniform(*spec.crown_base))
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        trees.append(Crown(instance_id=i + 1, kind=kind, x=x, y=y,
                           height=height, radius=radius, base=base))
        placed.append((x, y, spec.min_spacing))

    for _ in range(spec.n_rocks):
        radius = float(rng.uniform(1.0, 3.5))
        height = float(rng.uniform(*spec.rock_height_range))
        x, y = _place(rng, placed, extent, radius + 0.5, spec.min_spacing)
        confusers.append(Crown(instance_id=0, kind="rock", x=x, y=y,
                               height=height, radius=radius, base=0.0))
        placed.append((x, y, spec.min_spacing))

    for _ in range(spec.n_shrubs):
        radius = float(rng.uniform(0.6, 1.6))
        height = float(rng.uniform(0.6, 1.9))
        x, y = _place(rng, placed, extent, radius + 0.5, spec.min_spacing)
        confusers.append(Crown(instance_id=0, kind="shrub", x=x, y=y,
                               height=height, radius=radius, base=0.1))
        placed.append((x, y, spec.min_spacing))

    crowns = trees + confusers
    n_shots = int(round(spec.density * extent * extent))
    sx = rng.uniform(0.0, extent, n_shots)
    sy = rng.uniform(0.0, extent, n_shots)

    terrain = spec.slope * sx
    z = terrain + rng.normal(0.0, spec.noise, n_shots)
    instance = np.zeros(n_shots, dtype=np.uint32)
    semantic = np.zeros(n_shots, dtype=np.uint8)

    # First-return logic: a shot under several envelopes returns from the
    # highest one.
    best_surface = np.full(n_shots, -np.inf)
    owner = np.full(n_shots, -1, dtype=np.int64)
    for ci, crown in enumerate(crowns):
        d = np.hypot(sx - crown.x, sy - crown.y)
        inside = d < crown.radius
        if not inside.any():
            continue
        surf = crown.surface_height(d[inside])
        take = surf > best_surface[inside]
        idx = np.flatnonzero(inside)[take]
        best_surface[idx] = surf[take]
        owner[idx] = ci

    hit = owner >= 0
    hit_idx = np.flatnonzero(hit)
    u = rng.uniform(0.0, 1.0, hit_idx.size)
    for row, si in enumerate(hit_idx):
        crown = crowns[owner[si]]
        if u[row] < spec.punch_through:
            continue  # ground return under the canopy
        surface = best_surface[si]
        if u[row] < spec.punch_through + spec.penetration:
            depth = rng.uniform(crown.base, max(surface, crown.base + 1e-6))
            z[si] = terrain[si] + depth + rng.normal(0.0, spec.noise)
        else:
            z[si] = terrain[si] + surface + rng.normal(0.0, spec.noise)
        instance[si] = crown.instance_id
        semantic[si] = SEM_TREE if crown.instance_id else SEM_GROUND

    # One exact apex return per tree keeps the canopy maxima truthful.
    apex_x = np.array([t.x for t in trees])
    apex_y = np.array([t.y for t in trees])
    apex_z = spec.slope * apex_x + np.array([t.height for t in trees])
    x = np.concatenate([sx, apex_x])
    y = np.concatenate([sy, apex_y])
    z = np.concatenate([z, apex_z])
    instance = np.concatenate([instance,
                               np.array([t.instance_id for t in trees], dtype=np.uint32)])
    semantic = np.concatenate([semantic,
                               np.full(len(trees), SEM_TREE, dtype=np.uint8)])

    cloud = PointCloud(x=x, y=y, z=z)
    return SyntheticScene(spec=spec, cloud=cloud, instance=instance,
                          semantic=semantic, trees=trees, confusers=confusers)


def _sample_crown_points(rng: np.random.Generator, crown: Crown, density: float,
                         penetration: float = 0.25) -> np.ndarray:
    """Stand-alone crown sampling (terrain 0) used by the rating corpus."""
    n = max(8, int(round(density * np.pi * crown.radius ** 2)))
    d = crown.radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    px = crown.x + d * np.cos(theta)
    py = crown.y + d * np.sin(theta)
    surf = crown.surface_height(d)
    pz = surf + rng.normal(0.0, 0.05, n)
    inside = rng.uniform(0.0, 1.0, n) < penetration
    pz[inside] = rng.uniform(np.full(inside.sum(), crown.base),
                             np.maximum(surf[inside], crown.base + 1e-6))
    apex = np.array([[crown.x, crown.y, crown.height]])
    return np.concatenate([np.column_stack([px, py, pz]), apex])


def generate_rating_corpus(n_per_class: int | tuple[int, int, int], seed: int = 0,
                           density: float = 38.0) -> tuple[list[np.ndarray], np.ndarray]:
    """Clusters with exact rating labels: Single / Multi / NonTree.

    Single is one crown; Multi is 2 or 3 overlapping crowns whose apexes sit
    more than 1 m apart; NonTree is a rock blob or a shrub patch. Pass a
    3-tuple of counts to control class imbalance.
    """
    from .ratings import RatingClass

    if isinstance(n_per_class, int):
        counts = (n_per_class,) * 3
    else:
        counts = tuple(n_per_class)
    if len(counts) != 3 or min(counts) < 0:
        raise ValueError("counts must be 3 non-negative integers")

    rng = np.random.default_rng(seed)
    clusters: list[np.ndarray] = []
    labels: list[int] = []

    def random_tree(cx: float, cy: float) -> Crown:
        return Crown(instance_id=1, kind="cone" if rng.uniform() < 0.5 else "ellipsoid",
                     x=cx, y=cy, height=float(rng.uniform(3.5, 14.0)),
                     radius=float(rng.uniform(1.5, 3.2)),
                     base=float(rng.uniform(0.5, 1.5)))

    for _ in range(counts[int(RatingClass.SINGLE)]):
        clusters.append(_sample_crown_points(rng, random_tree(0.0, 0.0), density))
        labels.append(int(RatingClass.SINGLE))

    for _ in range(counts[int(RatingClass.MULTI)]):
        k = int(rng.integers(2, 4))
        first = random_tree(0.0, 0.0)
        parts = [_sample_crown_points(rng, first, density)]
        for _ in range(k - 1):
            while True:
                angle = rng.uniform(0.0, 2.0 * np.pi)
                gap = rng.uniform(max(1.2, 0.5 * first.radius), 0.9 * 2 * first.radius)
                other = random_tree(first.x + gap * np.cos(angle),
                                    first.y + gap * np.sin(angle))
                if np.hypot(other.x - first.x, other.y - first.y) > 1.0:
                    break
            parts.append(_sample_crown_points(rng, other, density))
        clusters.append(np.concatenate(parts))
        labels.append(int(RatingClass.MULTI))

    for _ in range(counts[int(RatingClass.NON_TREE)]):
        if rng.uniform() < 0.5:
            rock = Crown(instance_id=0, kind="rock", x=0.0, y=0.0,
                         height=float(rng.uniform(0.8, 3.0)),
                         radius=float(rng.uniform(1.2, 4.0)), base=0.0)
            clusters.append(_sample_crown_points(rng, rock, density * 1.5,
                                                 penetration=0.5))
        else:
            parts = []
            for _ in range(int(rng.integers(1, 4))):
                shrub = Crown(instance_id=0, kind="shrub",
                              x=float(rng.uniform(-2.5, 2.5)),
                              y=float(rng.uniform(-2.5, 2.5)),
                              height=float(rng.uniform(0.5, 1.9)),
                              radius=float(rng.uniform(0.5, 1.5)), base=0.05)
                parts.append(_sample_crown_points(rng, shrub, density))
            clusters.append(np.concatenate(parts))
        labels.append(int(RatingClass.NON_TREE))

    return clusters, np.asarray(labels, dtype=np.int64)


def oracle_rating(cluster_indices: np.ndarray, gt_instance: np.ndarray,
                  tree_fraction: float = 0.5, part_fraction: float = 0.2,
                  coverage: float = 0.5):
    """The simulated operator: rate a cluster from exact ground truth.

    NonTree when under half the points belong to any tree; Multi when at
    least two trees each contribute a sizable share, or the dominant tree is
    mostly missing from the cluster; Single otherwise.
    """
    from .ratings import RatingClass

    owners = gt_instance[np.asarray(cluster_indices)]
    if (owners != 0).mean() < tree_fraction:
        return RatingClass.NON_TREE
    ids, counts = np.unique(owners[owners != 0], return_counts=True)
    substantial = (counts / owners.size > part_fraction).sum()
    if substantial >= 2:
        return RatingClass.MULTI
    dominant = ids[counts.argmax()]
    covered = counts.max() / max(1, (gt_instance == dominant).sum())
    return RatingClass.SINGLE if covered >= coverage else RatingClass.MULTI


def rate_clusters_from_truth(cs: ClusterSet, gt_instance: np.ndarray) -> dict:
    """Rate every cluster of a set with the simulated operator."""
    return {cid: oracle_rating(cs[cid].point_indices, gt_instance)
            for cid in cs.ids()}


def scene_tiles(scene: SyntheticScene, tile_size: float = 100.0,
                ) -> tuple[list[Tile], list[ClusterSet], list[LabelMap]]:
    """Tile a scene and carry the truth through: per-tile gt clusters + labels.

    Heights are normalized with the pipeline's own ground model so synthetic
    tiles look exactly like ingested ones.
    """
    cloud = scene.cloud
    minx = float(cloud.x.min())
    miny = float(cloud.y.min())
    tiles = build_tiles(cloud, tile_size)
    gt_clusters: list[ClusterSet] = []
    gt_labels: list[LabelMap] = []
    for tile in tiles:
        ix = np.floor((cloud.x - minx) / tile_size).astype(np.int64)
        iy = np.floor((cloud.y - miny) / tile_size).astype(np.int64)
        sel = np.flatnonzero((ix == tile.ix) & (iy == tile.iy))
        normalize_heights(tile, estimate_ground(tile))

        instance = scene.instance[sel]
        semantic = scene.semantic[sel]
        cs = ClusterSet(len(tile))
        next_id = 1
        for iid in np.unique(instance):
            if iid == 0:
                continue
            members = np.flatnonzero(instance == iid)
            cs.add(make_cluster(tile, next_id, members, source="watershed"))
            next_id += 1
        gt_clusters.append(cs)

        lm = LabelMap(semantic=semantic.astype(np.uint8).copy(),
                      instance=np.zeros(sel.size, dtype=np.uint32))
        for cluster in cs:
            lm.instance[cluster.point_indices] = cluster.id
            lm.semantic[cluster.point_indices] = SEM_TREE
        lm.next_instance = next_id
        gt_labels.append(lm)
    return tiles, gt_clusters, gt_labels


def write_scene(scene: SyntheticScene, out_dir: str | Path,
                tile_size: float = 100.0) -> Path:
    """Emit TileStore + gt clusters + gt labels + scene_truth.json."""
    from .clusters import save_clusters

    out = Path(out_dir)
    tiles, gt_clusters, gt_labels = scene_tiles(scene, tile_size)
    write_tilestore(tiles, out / "tiles", crs="synthetic")
    for tile, cs, lm in zip(tiles, gt_clusters, gt_labels):
        save_clusters(cs, out / "gt_clusters" / f"{tile.name}.json")
        save_labels(lm, out / "gt_labels" / f"{tile.name}.lblm",
                    manifest={"tile": tile.name, "provenance": "synthetic-truth"})
    truth = {
        "spec": {
            "extent": scene.spec.extent, "slope": scene.spec.slope,
            "n_trees": scene.spec.n_trees, "density": scene.spec.density,
            "seed": scene.spec.seed, "n_rocks": scene.spec.n_rocks,
            "n_shrubs": scene.spec.n_shrubs,
        },
        "trees": [{"id": t.instance_id, "x": t.x, "y": t.y, "height": t.height,
                   "radius": t.radius, "kind": t.kind} for t in scene.trees],
        "confusers": [{"x": c.x, "y": c.y, "height": c.height,
                       "radius": c.radius, "kind": c.kind}
                      for c in scene.confusers],
        "tiles": [{"name": t.name, "gt_instances": len(cs)}
                  for t, cs in zip(tiles, gt_clusters)],
    }
    (out / "scene_truth.json").write_text(json.dumps(truth, indent=2))
    return out
