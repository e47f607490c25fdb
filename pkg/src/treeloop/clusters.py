"""Cluster and ClusterSet: instance hypotheses over one tile's points.

A cluster references tile points by index. The apex is the member with
maximal hag (ties resolved to the lowest index) and the centroid is the 3D
mean, both computed at construction from the tile so they can never drift
from the membership.

Serialized form: ``clusters/<tile>.json`` holding a list of
{id, point_indices, apex_index, centroid, source}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tiles import Tile


class ClusterError(ValueError):
    pass


@dataclass
class Cluster:
    id: int
    point_indices: np.ndarray  # ascending, unique, int64
    apex_index: int            # tile point index of the highest-hag member
    centroid: tuple[float, float, float]
    source: str = "watershed"  # {"watershed", "backend"}

    def __post_init__(self) -> None:
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64)
        if self.point_indices.size == 0:
            raise ClusterError(f"cluster {self.id} is empty")
        if self.id <= 0:
            raise ClusterError("cluster ids must be positive")
        if np.any(np.diff(self.point_indices) <= 0):
            raise ClusterError(f"cluster {self.id}: indices must be ascending and unique")

    def __len__(self) -> int:
        return int(self.point_indices.size)


def make_cluster(tile: Tile, cid: int, indices: np.ndarray,
                 source: str = "watershed") -> Cluster:
    """Build a cluster from tile point indices, deriving apex and centroid."""
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if idx.size == 0:
        raise ClusterError("cannot build a cluster from zero points")
    p = tile.points
    hag = p.hag[idx]
    apex = int(idx[np.argmax(hag)])  # argmax returns the first (lowest) on ties
    centroid = (float(p.x[idx].mean()), float(p.y[idx].mean()), float(p.z[idx].mean()))
    return Cluster(id=cid, point_indices=idx, apex_index=apex,
                   centroid=centroid, source=source)


class ClusterSet:
    """Pairwise-disjoint clusters over one tile plus the point -> id inverse map."""

    def __init__(self, n_points: int):
        self.clusters: dict[int, Cluster] = {}
        self.point_cluster = np.zeros(n_points, dtype=np.uint32)  # 0 = unassigned

    def __len__(self) -> int:
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters.values())

    def __contains__(self, cid: int) -> bool:
        return cid in self.clusters

    def __getitem__(self, cid: int) -> Cluster:
        return self.clusters[cid]

    def ids(self) -> list[int]:
        return sorted(self.clusters)

    def add(self, cluster: Cluster) -> None:
        if cluster.id in self.clusters:
            raise ClusterError(f"duplicate cluster id {cluster.id}")
        taken = self.point_cluster[cluster.point_indices]
        if np.any(taken != 0):
            other = int(taken[taken != 0][0])
            raise ClusterError(
                f"cluster {cluster.id} overlaps cluster {other}; clusters must be disjoint")
        self.clusters[cluster.id] = cluster
        self.point_cluster[cluster.point_indices] = cluster.id

    def validate(self) -> None:
        """Assert the inverse map is consistent with the memberships."""
        seen = np.zeros_like(self.point_cluster)
        for cluster in self:
            if np.any(seen[cluster.point_indices] != 0):
                raise ClusterError("clusters share points")
            seen[cluster.point_indices] = cluster.id
        if not np.array_equal(seen, self.point_cluster):
            raise ClusterError("inverse map out of sync with memberships")


def save_clusters(cs: ClusterSet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "n_points": int(cs.point_cluster.size),
        "clusters": [
            {
                "id": c.id,
                "point_indices": c.point_indices.tolist(),
                "apex_index": c.apex_index,
                "centroid": list(c.centroid),
                "source": c.source,
            }
            for c in sorted(cs, key=lambda c: c.id)
        ],
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)
    return path


def load_clusters(path: str | Path) -> ClusterSet:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        cs = ClusterSet(int(payload["n_points"]))
        for entry in payload["clusters"]:
            cs.add(Cluster(
                id=int(entry["id"]),
                point_indices=np.asarray(entry["point_indices"], dtype=np.int64),
                apex_index=int(entry["apex_index"]),
                centroid=tuple(entry["centroid"]),
                source=entry["source"],
            ))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ClusterError(f"malformed cluster file {path}: {exc}") from exc
    return cs
