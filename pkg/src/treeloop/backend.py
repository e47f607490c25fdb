"""Segmentation backends: the built-in reference model and the external hook.

The reference backend is deliberately small: a two-layer perceptron scoring
P(tree) per point from geometric features, followed by seed-and-grow instance
extraction. The loop's contract is that Gray points carry zero loss weight,
that training is deterministic under a seed, and that predictions come back
as ClusterSets; a heavyweight panoptic model attaches through the external
command protocol instead and exchanges the exact same file formats.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .clusters import ClusterSet, load_clusters, make_cluster
from .config import BackendConfig
from .features import extract_features
from .labels import SEM_GRAY, SEM_GROUND, SEM_TREE, LabelMap, load_labels
from .tiles import Tile


class BackendError(RuntimeError):
    pass


class TreeScorer:
    """Two-layer perceptron on standardized point features, outputs P(tree)."""

    def __init__(self, n_features: int, hidden: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.fc0 = nn.Linear("scorer.fc0", n_features, hidden, rng=rng, dtype=np.float64)
        self.relu = nn.ReLU()
        self.fc1 = nn.Linear("scorer.fc1", hidden, 1, rng=rng, dtype=np.float64)
        self.mean = np.zeros(n_features)
        self.std = np.ones(n_features)

    def params(self) -> list[nn.Param]:
        return self.fc0.params() + self.fc1.params()

    def fit_standardizer(self, feats: np.ndarray) -> None:
        self.mean = feats.mean(axis=0)
        self.std = feats.std(axis=0)
        self.std[self.std < 1e-9] = 1.0

    def logits(self, feats: np.ndarray, train: bool = False) -> np.ndarray:
        x = (np.asarray(feats, dtype=np.float64) - self.mean) / self.std
        h = self.relu.forward(self.fc0.forward(x, train, False), train, False)
        return self.fc1.forward(h, train, False)[:, 0]

    def backward(self, dlogits: np.ndarray) -> None:
        dh = self.fc1.backward(dlogits[:, None])
        self.fc0.backward(self.relu.backward(dh))

    def predict_proba(self, feats: np.ndarray) -> np.ndarray:
        z = self.logits(feats, train=False)
        return 1.0 / (1.0 + np.exp(-z))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path,
                 mean=self.mean, std=self.std,
                 fc0_w=self.fc0.w.value, fc0_b=self.fc0.b.value,
                 fc1_w=self.fc1.w.value, fc1_b=self.fc1.b.value)

    @classmethod
    def load(cls, path: str | Path) -> "TreeScorer":
        data = np.load(path)
        scorer = cls(n_features=data["fc0_w"].shape[0], hidden=data["fc0_w"].shape[1])
        scorer.mean = data["mean"]
        scorer.std = data["std"]
        scorer.fc0.w.value = data["fc0_w"].copy()
        scorer.fc0.b.value = data["fc0_b"].copy()
        scorer.fc1.w.value = data["fc1_w"].copy()
        scorer.fc1.b.value = data["fc1_b"].copy()
        return scorer


def weighted_bce(logits: np.ndarray, targets: np.ndarray,
                 weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted binary cross entropy on logits; weight 0 removes a point.

    Loss = sum_i w_i * (softplus(z_i) - y_i * z_i) / sum_i w_i; the gradient
    of a zero-weight point is exactly zero, so Gray points cannot influence
    training in any way.
    """
    wsum = weights.sum()
    if wsum <= 0:
        raise BackendError("no supervised points (all weights zero)")
    softplus = np.logaddexp(0.0, logits)
    loss = float((weights * (softplus - targets * logits)).sum() / wsum)
    sigma = 1.0 / (1.0 + np.exp(-logits))
    dlogits = weights * (sigma - targets) / wsum
    return loss, dlogits


def label_weights(labels: LabelMap) -> tuple[np.ndarray, np.ndarray]:
    """(target, weight) per point: Ground -> (0, 1), Tree -> (1, 1), Gray -> (0, 0)."""
    targets = (labels.semantic == SEM_TREE).astype(np.float64)
    weights = np.ones(len(labels), dtype=np.float64)
    weights[labels.semantic == SEM_GRAY] = 0.0
    return targets, weights


def train_backend(tiles: list[Tile], label_maps: list[LabelMap], epochs: int,
                  seed: int = 0, cfg: BackendConfig | None = None,
                  scorer: TreeScorer | None = None,
                  features: list[np.ndarray] | None = None) -> TreeScorer:
    """Train (or continue training) the per-point scorer on pseudo-labels.

    Gray points carry zero weight. Deterministic under (seed, epochs): batch
    order comes from a dedicated generator. Pass the previous iteration's
    scorer to fine-tune instead of restarting.
    """
    cfg = cfg or BackendConfig()
    if features is None:
        features = [extract_features(t) for t in tiles]
    feats = np.concatenate(features, axis=0)
    targets = []
    weights = []
    for lm in label_maps:
        t, w = label_weights(lm)
        targets.append(t)
        weights.append(w)
    target = np.concatenate(targets)
    weight = np.concatenate(weights)
    if weight.sum() == 0:
        raise BackendError("no supervised points (all labels Gray)")

    if scorer is None:
        scorer = TreeScorer(feats.shape[1], cfg.hidden, seed=seed)
        scorer.fit_standardizer(feats)
    optimizer = nn.Adam(scorer.params(), lr=cfg.learning_rate)
    rng = np.random.default_rng(seed)

    n = feats.shape[0]
    for _ in range(max(1, epochs)):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            w = weight[idx]
            if w.sum() == 0:
                continue
            optimizer.zero_grad()
            z = scorer.logits(feats[idx], train=True)
            loss, dz = weighted_bce(z, target[idx], w)
            if not np.isfinite(loss):
                raise BackendError(f"non-finite backend loss: {loss}")
            scorer.backward(dz)
            optimizer.step()
    return scorer


def predict_instances(tile: Tile, scorer: TreeScorer,
                      cfg: BackendConfig | None = None,
                      features: np.ndarray | None = None,
                      labels: LabelMap | None = None) -> ClusterSet:
    """Segment a tile into candidate instances.

    Tree mask by thresholded P(tree); seeds are hag maxima that dominate
    their horizontal neighborhood (seed_radius) among tree points; every tree
    point then joins the seed minimizing 3D distance plus half the horizontal
    distance, which biases assignment toward the vertical crown axis. Tiny
    clusters are dropped.

    When the current pseudo-labels are supplied, confirmed instances seed
    directly at their apexes and maxima detection runs on the residual
    (unconfirmed) tree points only. A tall confirmed crown then no longer
    suppresses the shorter neighbor hiding under its flank, which is what
    lets the loop keep finding new trees iteration after iteration.
    """
    cfg = cfg or BackendConfig()
    if features is None:
        features = extract_features(tile)
    cs = ClusterSet(len(tile))
    proba = scorer.predict_proba(features)
    tree_idx = np.flatnonzero(proba > cfg.tree_threshold)
    if tree_idx.size == 0:
        return cs
    p = tile.points
    x = p.x[tree_idx]
    y = p.y[tree_idx]
    hag = p.hag[tree_idx].astype(np.float64)

    if labels is not None and labels.instance_ids().size:
        confirmed_apexes = []
        for iid in labels.instance_ids():
            members = labels.points_of(int(iid))
            confirmed_apexes.append(int(members[np.argmax(p.hag[members])]))
        # Positions of confirmed apexes within the tree-point subset; apexes
        # our mask rejected are appended so their instance still seeds.
        pos = {int(t): row for row, t in enumerate(tree_idx)}
        extra = [a for a in confirmed_apexes if a not in pos]
        if extra:
            tree_idx = np.concatenate([tree_idx, np.asarray(extra, dtype=np.int64)])
            x = p.x[tree_idx]
            y = p.y[tree_idx]
            hag = p.hag[tree_idx].astype(np.float64)
            pos = {int(t): row for row, t in enumerate(tree_idx)}
        seed_rows = [pos[a] for a in confirmed_apexes]
        unconfirmed = labels.instance[tree_idx] == 0
        residual_rows = np.flatnonzero(unconfirmed)
        maxima = _dominant_maxima(x[residual_rows], y[residual_rows],
                                  hag[residual_rows], cfg.seed_radius)
        seeds = np.concatenate([np.asarray(sorted(seed_rows), dtype=np.int64),
                                residual_rows[maxima]])
    else:
        seeds = _dominant_maxima(x, y, hag, cfg.seed_radius)
    if seeds.size == 0:
        return cs

    # Nearest-seed growth with horizontal penalty, chunked over points.
    sx, sy = x[seeds], y[seeds]
    sz = p.z[tree_idx[seeds]]
    assign = np.empty(tree_idx.size, dtype=np.int64)
    z = p.z[tree_idx]
    chunk = 65536
    for lo in range(0, tree_idx.size, chunk):
        hi = min(lo + chunk, tree_idx.size)
        dx = x[lo:hi, None] - sx[None, :]
        dy = y[lo:hi, None] - sy[None, :]
        dz = z[lo:hi, None] - sz[None, :]
        horiz = np.sqrt(dx * dx + dy * dy)
        cost = np.sqrt(dx * dx + dy * dy + dz * dz) + 0.5 * horiz
        assign[lo:hi] = cost.argmin(axis=1)

    next_id = 1
    for s in range(seeds.size):
        members = tree_idx[assign == s]
        if members.size < cfg.min_cluster_points:
            continue
        cs.add(make_cluster(tile, next_id, members, source="backend"))
        next_id += 1
    return cs


def _dominant_maxima(x: np.ndarray, y: np.ndarray, value: np.ndarray,
                     radius: float) -> np.ndarray:
    """Indices of points whose value tops every point within an XY radius.

    Ties go to the lowest index. Prefiltered per 1 m cell (only the per-cell
    argmax can dominate its disc), then checked exactly.
    """
    n = x.size
    if n == 0:
        return np.empty(0, dtype=np.int64)
    x0, y0 = x.min(), y.min()
    cell = 1.0
    cx = ((x - x0) / cell).astype(np.int64)
    cy = ((y - y0) / cell).astype(np.int64)
    w = int(cx.max()) + 1
    h = int(cy.max()) + 1
    key = cx * h + cy

    order = np.lexsort((np.arange(n), -value))  # by value desc, then index asc
    first = np.full(w * h, -1, dtype=np.int64)
    for i in order[::-1]:
        first[key[i]] = i   # ends holding the best point per cell
    candidates = first[first >= 0]

    r_cells = int(np.ceil(radius / cell))
    sort_by_key = np.argsort(key, kind="stable")
    starts = np.searchsorted(key[sort_by_key], np.arange(w * h + 1))

    seeds = []
    for i in candidates:
        ci, cj = int(cx[i]), int(cy[i])
        chunks = []
        for a in range(max(0, ci - r_cells), min(w, ci + r_cells + 1)):
            base = a * h
            lo = starts[base + max(0, cj - r_cells)]
            hi = starts[min(base + cj + r_cells + 1, base + h)]
            chunks.append(sort_by_key[lo:hi])
        neigh = np.concatenate(chunks)
        d2 = (x[neigh] - x[i]) ** 2 + (y[neigh] - y[i]) ** 2
        inside = neigh[d2 <= radius * radius]
        v = value[inside]
        best = v.max()
        if best > value[i]:
            continue
        top = inside[v == best]
        if top.min() == i:
            seeds.append(i)
    return np.asarray(sorted(seeds), dtype=np.int64)


@dataclass
class BackendJob:
    kind: str                 # {"train", "predict"}
    tiles_dir: Path
    labels_dir: Path | None = None
    output_dir: Path | None = None
    epochs: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("train", "predict"):
            raise BackendError(f"unknown job kind {self.kind!r}")
        if not Path(self.tiles_dir).is_dir():
            raise BackendError(f"tiles dir missing: {self.tiles_dir}")
        if self.kind == "train":
            if self.labels_dir is None or not Path(self.labels_dir).is_dir():
                raise BackendError(f"labels dir missing: {self.labels_dir}")
            if self.epochs < 1:
                raise BackendError("train jobs need epochs >= 1")
        if self.kind == "predict" and self.output_dir is None:
            raise BackendError("predict jobs need an output dir")


def invoke_external(job: BackendJob, command_template: str,
                    timeout: float = 3600.0) -> dict:
    """Run an external segmentation backend through the file protocol.

    Substitutes {tiles} {labels} {out} {epochs} {seed} into the template,
    runs it, and validates that declared outputs parse. Returns a status dict
    with captured stdout/stderr; raises BackendError on failure.
    """
    job.validate()
    if job.output_dir is not None:
        Path(job.output_dir).mkdir(parents=True, exist_ok=True)
    # Literal token replacement, not str.format: templates are shell commands
    # and may legitimately contain braces (JSON, ${VAR}, awk).
    command = command_template
    for token, value in (("{tiles}", str(job.tiles_dir)),
                         ("{labels}", str(job.labels_dir or "")),
                         ("{out}", str(job.output_dir or "")),
                         ("{epochs}", str(job.epochs)),
                         ("{seed}", str(job.seed))):
        command = command.replace(token, value)
    try:
        proc = subprocess.run(command, shell=True, capture_output=True,
                              text=True, timeout=timeout)
    except subprocess.TimeoutExpired as exc:
        raise BackendError(f"backend timed out after {timeout}s: {command}") from exc
    status = {"command": command, "returncode": proc.returncode,
              "stdout": proc.stdout, "stderr": proc.stderr}
    if proc.returncode != 0:
        raise BackendError(
            f"backend exited {proc.returncode}: {command}\nstderr: {proc.stderr}")
    if job.output_dir is not None:
        try:
            _validate_outputs(Path(job.output_dir))
        except Exception as exc:
            raise BackendError(f"malformed output: {exc}\nstderr: {proc.stderr}") from exc
    return status


def _validate_outputs(out_dir: Path) -> None:
    cluster_files = sorted(out_dir.rglob("*.json"))
    for f in cluster_files:
        if f.name in ("manifest.json", "labels_manifest.json", "scene_truth.json"):
            continue
        load_clusters(f)
    for f in sorted(out_dir.rglob("*.lblm")):
        load_labels(f)
