"""Pseudo-label state and the geometric candidate-acceptance rules.

The label map starts all-Ground; rated clusters promote points to Gray
(multiple trees, unresolved) or to Tree with a fresh instance id (a confirmed
single tree). Gray carries zero loss weight downstream, so it shields the
segmentation model from regions we cannot yet resolve. Instances are only
ever added, never deleted, which is what makes the loop's confirmed count
monotone.

A model-rated Single candidate joins the map if it touches no existing
instance; otherwise it must have its own tip, a thin enough overlap with each
instance it touches, and an intersection-over-cluster below threshold on both
sides. Contested points of an accepted candidate go to the nearer 3D
centroid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clusters import Cluster
from .config import RulesConfig
from .tiles import Tile

SEM_GROUND = 0
SEM_GRAY = 1
SEM_TREE = 2

LBLM_MAGIC = b"LBLM"
LBLM_VERSION = 1


class LabelError(ValueError):
    pass


@dataclass
class LabelMap:
    """Per-point semantic {Ground, Gray, Tree} and instance id (0 = none)."""

    semantic: np.ndarray        # u8
    instance: np.ndarray        # u32
    next_instance: int = 1

    @classmethod
    def all_ground(cls, n_points: int) -> "LabelMap":
        return cls(semantic=np.zeros(n_points, dtype=np.uint8),
                   instance=np.zeros(n_points, dtype=np.uint32))

    def __len__(self) -> int:
        return int(self.semantic.size)

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.instance)
        return ids[ids != 0]

    def points_of(self, instance_id: int) -> np.ndarray:
        return np.flatnonzero(self.instance == instance_id)

    def fresh_id(self) -> int:
        out = self.next_instance
        self.next_instance += 1
        return out

    def validate(self) -> None:
        if self.semantic.size != self.instance.size:
            raise LabelError("semantic/instance arrays differ in length")
        if np.any((self.instance != 0) & (self.semantic != SEM_TREE)):
            raise LabelError("a point with an instance id must be semantic Tree")
        ids = self.instance_ids()
        if ids.size and self.next_instance <= int(ids.max()):
            raise LabelError("next_instance must exceed every used id")

    def copy(self) -> "LabelMap":
        return LabelMap(self.semantic.copy(), self.instance.copy(), self.next_instance)


def build_initial_labels(tile: Tile, clusters, ratings) -> LabelMap:
    """Initial pseudo-labels from rated clusters.

    Everything starts as Ground. Multi-rated clusters turn Gray, Single-rated
    clusters become Tree instances, NonTree-rated clusters stay Ground.
    Single wins over Gray when memberships collide (clusters from the
    watershed are disjoint, but the rule is kept explicit by applying Gray
    first). Every referenced cluster must carry a rating.
    """
    from .ratings import RatingClass

    labels = LabelMap.all_ground(len(tile))
    ordered = sorted(clusters, key=lambda c: c.id)
    rated = {}
    for cluster in ordered:
        record = ratings.get(cluster.id)
        if record is None:
            raise LabelError(f"cluster {cluster.id} has no rating")
        rated[cluster.id] = record.rating
    for cluster in ordered:
        if rated[cluster.id] == RatingClass.MULTI:
            labels.semantic[cluster.point_indices] = SEM_GRAY
    for cluster in ordered:
        if rated[cluster.id] == RatingClass.SINGLE:
            iid = labels.fresh_id()
            labels.semantic[cluster.point_indices] = SEM_TREE
            labels.instance[cluster.point_indices] = iid
    return labels


def ioc(candidate: Cluster, other: Cluster) -> tuple[float, float]:
    """Intersection over cluster, evaluated for each of the two clusters.

    Returns (|I| / |candidate|, |I| / |other|). Intersection over cluster is
    preferred to IoU here so a small tree overlapping a large one is not
    drowned by the union size.
    """
    if len(candidate) == 0 or len(other) == 0:
        raise LabelError("ioc of an empty cluster")
    inter = np.intersect1d(candidate.point_indices, other.point_indices,
                           assume_unique=True).size
    return inter / len(candidate), inter / len(other)


@dataclass
class Decision:
    accepted: bool
    reasons: list[str] = field(default_factory=list)
    intersecting: list[int] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.accepted


def _instance_apex(tile: Tile, labels: LabelMap, instance_id: int) -> int:
    idx = labels.points_of(instance_id)
    return int(idx[np.argmax(tile.points.hag[idx])])


def accept_candidate(candidate: Cluster, tile: Tile, labels: LabelMap,
                     rules: RulesConfig | None = None) -> Decision:
    """Decide whether a model-rated Single candidate becomes a new instance.

    No intersection with any existing instance (only Ground or Gray points
    under the candidate) accepts immediately. Otherwise, for every instance
    the candidate touches, all of:

    - tip: the candidate's highest point must differ from the instance's
      highest point (3D distance above the apex tolerance);
    - overlap extent: the horizontal diameter of the intersection point set
      must not exceed the threshold (a sliver shared between neighboring
      crowns, not a body overlap);
    - ioc: intersection over cluster strictly below the threshold for both
      the candidate and the instance.

    All failed tests are reported, one reason per failing instance and test.
    """
    rules = rules or RulesConfig()
    p = tile.points
    decision = Decision(accepted=True)

    overlap_ids = labels.instance[candidate.point_indices]
    touched = np.unique(overlap_ids[overlap_ids != 0])
    decision.intersecting = [int(i) for i in touched]
    if touched.size == 0:
        return decision

    apex = candidate.apex_index
    apex_xyz = np.array([p.x[apex], p.y[apex], p.z[apex]])
    for iid in touched:
        inst_idx = labels.points_of(int(iid))
        other_apex = _instance_apex(tile, labels, int(iid))
        other_xyz = np.array([p.x[other_apex], p.y[other_apex], p.z[other_apex]])
        if np.linalg.norm(apex_xyz - other_xyz) <= rules.apex_tolerance:
            decision.accepted = False
            decision.reasons.append(f"tip:{iid}")

        inter = np.intersect1d(candidate.point_indices, inst_idx, assume_unique=True)
        if rules.overlap_strategy == "diameter":
            extent = _horizontal_diameter(p.x[inter], p.y[inter])
        else:
            extent = _interpenetration_depth(p, inter, candidate.centroid,
                                             _centroid_of(p, inst_idx))
        if extent > rules.overlap_diameter:
            decision.accepted = False
            decision.reasons.append(f"overlap_extent:{iid}")

        ioc_candidate = inter.size / len(candidate)
        ioc_instance = inter.size / inst_idx.size
        if ioc_candidate >= rules.ioc_threshold or ioc_instance >= rules.ioc_threshold:
            decision.accepted = False
            decision.reasons.append(f"ioc:{iid}")
    return decision


def _horizontal_diameter(x: np.ndarray, y: np.ndarray) -> float:
    """Max pairwise XY distance of a point set (0 for < 2 points)."""
    if x.size < 2:
        return 0.0
    dx = x[:, None] - x[None, :]
    dy = y[:, None] - y[None, :]
    return float(np.sqrt(dx * dx + dy * dy).max())


def _centroid_of(p, idx: np.ndarray) -> tuple[float, float, float]:
    return (float(p.x[idx].mean()), float(p.y[idx].mean()), float(p.z[idx].mean()))


def _interpenetration_depth(p, inter: np.ndarray, cand_centroid,
                            other_centroid) -> float:
    """Alternate overlap reading ("boundary" strategy): the extent of the
    intersection along the axis joining the two cluster centroids.

    A thin crescent where two crowns brush past each other is wide across
    but shallow along the axis; one crown swallowing another's core is deep
    along it. This measures how far the clusters interpenetrate rather than
    how long their shared boundary is.
    """
    if inter.size < 2:
        return 0.0
    ux = cand_centroid[0] - other_centroid[0]
    uy = cand_centroid[1] - other_centroid[1]
    norm = np.hypot(ux, uy)
    if norm < 1e-9:
        return _horizontal_diameter(p.x[inter], p.y[inter])
    ux /= norm
    uy /= norm
    proj = (p.x[inter] - other_centroid[0]) * ux + (p.y[inter] - other_centroid[1]) * uy
    return float(proj.max() - proj.min())


def merge_candidate(candidate: Cluster, tile: Tile, labels: LabelMap) -> int:
    """Add an accepted candidate to the label map; returns the new instance id.

    Non-contested candidate points take the fresh id. Contested points
    (already owned by another instance) go to whichever cluster's 3D centroid
    is nearer, candidate vs current owner, with centroids computed from the
    memberships before any reassignment; exact ties keep the existing owner.
    Every candidate point ends up semantic Tree.
    """
    p = tile.points
    new_id = labels.fresh_id()

    owners = labels.instance[candidate.point_indices]
    contested_mask = owners != 0
    cand_centroid = np.asarray(candidate.centroid)

    centroids = {}
    for iid in np.unique(owners[contested_mask]):
        idx = labels.points_of(int(iid))
        centroids[int(iid)] = np.array([p.x[idx].mean(), p.y[idx].mean(),
                                        p.z[idx].mean()])

    take = candidate.point_indices[~contested_mask]
    labels.semantic[candidate.point_indices] = SEM_TREE
    labels.instance[take] = new_id
    for i, owner in zip(candidate.point_indices[contested_mask],
                        owners[contested_mask]):
        xyz = np.array([p.x[i], p.y[i], p.z[i]])
        d_new = np.linalg.norm(xyz - cand_centroid)
        d_old = np.linalg.norm(xyz - centroids[int(owner)])
        if d_new < d_old:
            labels.instance[i] = new_id
    return new_id


def save_labels(labels: LabelMap, path: str | Path,
                manifest: dict | None = None) -> Path:
    """LBLM binary: magic, version, count, semantic u8[n], instance u32[n]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(LBLM_MAGIC)
        f.write(struct.pack("<I", LBLM_VERSION))
        f.write(struct.pack("<Q", len(labels)))
        f.write(labels.semantic.astype(np.uint8).tobytes())
        f.write(labels.instance.astype("<u4").tobytes())
    tmp.replace(path)
    if manifest is not None:
        info = dict(manifest)
        info["instance_count"] = int(labels.instance_ids().size)
        info["next_instance"] = labels.next_instance
        mpath = path.parent / "labels_manifest.json"
        existing = json.loads(mpath.read_text()) if mpath.exists() else {}
        existing[path.name] = info
        mpath.write_text(json.dumps(existing, indent=2))
    return path


def load_labels(path: str | Path) -> LabelMap:
    raw = Path(path).read_bytes()
    if raw[:4] != LBLM_MAGIC:
        raise LabelError(f"{path}: not a label file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != LBLM_VERSION:
        raise LabelError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack_from("<Q", raw, 8)
    offset = 16
    if len(raw) != offset + n * 5:
        raise LabelError(f"{path}: truncated label file")
    semantic = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset).copy()
    instance = np.frombuffer(raw, dtype="<u4", count=n, offset=offset + n).copy()
    ids = instance[instance != 0]
    nxt = int(ids.max()) + 1 if ids.size else 1
    return LabelMap(semantic=semantic, instance=instance, next_instance=nxt)
