"""The rate-retrain loop: predict, rate, grow the pseudo-labels, retrain.

One iteration runs the current segmentation backend over every tile, rates
all predicted clusters with the rating model, tries to merge each
model-rated-Single candidate through the acceptance rules, then fine-tunes
the backend for a few epochs on the updated labels. The loop stops when the
stream of newly confirmed instances dries up or an iteration budget runs out.

State is persisted write-then-swap: an iteration directory appears atomically
or not at all, so a killed run resumes from the last complete iteration and,
because every random choice derives from (seed, iteration), reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import TreeScorer, predict_instances, train_backend
from .clusters import ClusterSet, load_clusters, save_clusters
from .config import Config
from .features import extract_features
from .labels import (LabelMap, accept_candidate, build_initial_labels,
                     load_labels, merge_candidate, save_labels)
from .rater import RaterNet, load_rater, rate_points, save_rater, train_rater
from .ratings import RatingClass, RatingRecord, RatingStore
from .tiles import Tile, read_tilestore

METRICS_COLUMNS = ["iteration", "avg_trees_per_tile", "n_single", "n_multi",
                   "n_nontree", "pct_single", "pct_multi", "pct_nontree",
                   "new_instances"]


class LoopError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    iteration: int
    avg_trees_per_tile: float
    n_single: int
    n_multi: int
    n_nontree: int
    new_instances: int

    @property
    def total_rated(self) -> int:
        return self.n_single + self.n_multi + self.n_nontree

    def as_csv(self) -> list:
        total = self.total_rated
        pct = lambda n: (n / total) if total else 0.0
        # 12 decimals: three independently rounded proportions must still sum
        # to 1 within 1e-9.
        return [self.iteration, f"{self.avg_trees_per_tile:.6f}",
                self.n_single, self.n_multi, self.n_nontree,
                f"{pct(self.n_single):.12f}", f"{pct(self.n_multi):.12f}",
                f"{pct(self.n_nontree):.12f}", self.new_instances]


@dataclass
class LoopState:
    run_dir: Path
    config: Config
    tiles: list[Tile]
    tiles_dir: Path | None = None
    iteration: int = -1
    metrics: list[MetricsRow] = field(default_factory=list)
    labels: list[LabelMap] = field(default_factory=list)
    scorer: TreeScorer | None = None
    rater: RaterNet | None = None
    features: list[np.ndarray] = field(default_factory=list)

    @property
    def total_instances(self) -> int:
        return int(sum(lm.instance_ids().size for lm in self.labels))

    def iter_dir(self, k: int) -> Path:
        return self.run_dir / f"iter_{k:04d}"


def stop_check(state: LoopState) -> tuple[bool, str]:
    """(stop?, reason). Stop on stabilization or the iteration budget.

    Stabilized means the newly-confirmed count stayed under
    max(min_new, fraction * total instances) for `patience` consecutive
    iterations (iteration 0 rows do not count: initialization is not growth).
    """
    cfg = state.config.loop
    if state.iteration >= cfg.max_iterations:
        return True, "max_iterations"
    rows = [r for r in state.metrics if r.iteration >= 1]
    if len(rows) < cfg.stabilize_patience:
        return False, "continue"
    threshold = max(cfg.stabilize_min_new,
                    cfg.stabilize_fraction * state.total_instances)
    recent = rows[-cfg.stabilize_patience:]
    if all(r.new_instances < threshold for r in recent):
        return True, "stabilized"
    return False, "continue"


def cluster_points(tile: Tile, cs: ClusterSet) -> list[np.ndarray]:
    """Cluster coordinates for the rating model: (x, y, hag).

    Feeding height-above-ground instead of raw z flattens the terrain away,
    so a cluster on a steep slope voxelizes the same as one on flat ground.
    """
    p = tile.points
    return [np.column_stack([p.x[c.point_indices], p.y[c.point_indices],
                             p.hag[c.point_indices].astype(np.float64)])
            for c in sorted(cs, key=lambda c: c.id)]


def _rating_counts(ratings: list[int]) -> tuple[int, int, int]:
    arr = np.asarray(ratings, dtype=np.int64)
    return (int((arr == int(RatingClass.SINGLE)).sum()),
            int((arr == int(RatingClass.MULTI)).sum()),
            int((arr == int(RatingClass.NON_TREE)).sum()))


def rate_cluster_set(rater: RaterNet, tile: Tile,
                     cs: ClusterSet) -> dict[int, RatingRecord]:
    """Model-rate every cluster of a tile; returns id -> RatingRecord."""
    ids = cs.ids()
    if not ids:
        return {}
    pts = cluster_points(tile, cs)
    labels, confidence = rate_points(rater, pts)
    return {cid: RatingRecord(cluster_id=cid, rating=RatingClass(int(k)),
                              source="model", confidence=float(c))
            for cid, k, c in zip(ids, labels, confidence)}


def _persist_iteration(state: LoopState, k: int,
                       predictions: list[ClusterSet]) -> None:
    final = state.iter_dir(k)
    tmp = final.with_name(final.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    (tmp / "labels").mkdir()
    (tmp / "clusters").mkdir()
    (tmp / "params").mkdir()
    for tile, lm, cs in zip(state.tiles, state.labels, predictions):
        save_labels(lm, tmp / "labels" / f"{tile.name}.lblm",
                    manifest={"iteration": k, "provenance": "loop"})
        save_clusters(cs, tmp / "clusters" / f"{tile.name}.json")
    if state.scorer is not None:
        state.scorer.save(tmp / "params" / "scorer.npz")
    with open(tmp / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for row in state.metrics:
            writer.writerow(row.as_csv())
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def _load_iteration(state: LoopState, k: int) -> list[ClusterSet]:
    d = state.iter_dir(k)
    state.labels = [load_labels(d / "labels" / f"{t.name}.lblm")
                    for t in state.tiles]
    scorer_path = d / "params" / "scorer.npz"
    state.scorer = TreeScorer.load(scorer_path) if scorer_path.exists() else None
    predictions = [load_clusters(d / "clusters" / f"{t.name}.json")
                   for t in state.tiles]
    state.metrics = []
    with open(d / "metrics.csv", newline="") as f:
        for row in csv.DictReader(f):
            state.metrics.append(MetricsRow(
                iteration=int(row["iteration"]),
                avg_trees_per_tile=float(row["avg_trees_per_tile"]),
                n_single=int(row["n_single"]), n_multi=int(row["n_multi"]),
                n_nontree=int(row["n_nontree"]),
                new_instances=int(row["new_instances"])))
    state.iteration = k
    return predictions


def _external_round(state: LoopState, k: int, epochs: int,
                    seed: int) -> list[ClusterSet]:
    """Train-and-predict through the external backend protocol.

    One invocation per iteration: the external process trains on the current
    pseudo-labels for the given epochs (keeping whatever internal state it
    wants under its own workspace) and writes updated ClusterSet predictions
    to {out}/clusters/.
    """
    from .backend import BackendJob, invoke_external

    cfg = state.config
    job_dir = state.run_dir / "backend_jobs" / f"iter_{k:04d}"
    if job_dir.exists():
        shutil.rmtree(job_dir)
    labels_dir = job_dir / "labels"
    out_dir = job_dir / "out"
    labels_dir.mkdir(parents=True)
    for tile, lm in zip(state.tiles, state.labels):
        save_labels(lm, labels_dir / f"{tile.name}.lblm",
                    manifest={"iteration": k, "provenance": "loop"})
    job = BackendJob(kind="train", tiles_dir=Path(state.tiles_dir),
                     labels_dir=labels_dir, output_dir=out_dir,
                     epochs=epochs, seed=seed)
    invoke_external(job, cfg.backend.command, timeout=cfg.backend.timeout)
    return [load_clusters(out_dir / "clusters" / f"{tile.name}.json")
            for tile in state.tiles]


def run_iteration(state: LoopState, log=None) -> int:
    """One loop pass; returns the number of newly accepted instances."""
    cfg = state.config
    k = state.iteration + 1
    seed = cfg.loop.seed * 100003 + k
    external = cfg.backend.command is not None

    new_count = 0
    ratings_all: list[int] = []
    predictions: list[ClusterSet] = []
    if external:
        cluster_sets = _external_round(state, k, cfg.loop.epochs_per_iteration,
                                       seed)
    else:
        cluster_sets = [predict_instances(tile, state.scorer, cfg.backend,
                                          features=feats, labels=lm)
                        for tile, lm, feats in zip(state.tiles, state.labels,
                                                   state.features)]
    new_labels = [lm.copy() for lm in state.labels]
    for tile, lm, cs in zip(state.tiles, new_labels, cluster_sets):
        predictions.append(cs)
        records = rate_cluster_set(state.rater, tile, cs)
        ratings_all.extend(int(r.rating) for r in records.values())
        for cid in cs.ids():
            if records[cid].rating != RatingClass.SINGLE:
                continue
            candidate = cs[cid]
            if accept_candidate(candidate, tile, lm, cfg.rules):
                merge_candidate(candidate, tile, lm)
                new_count += 1

    state.labels = new_labels
    if not external:
        state.scorer = train_backend(state.tiles, state.labels,
                                     epochs=cfg.loop.epochs_per_iteration,
                                     seed=seed, cfg=cfg.backend,
                                     scorer=state.scorer,
                                     features=state.features)
    n_single, n_multi, n_nontree = _rating_counts(ratings_all)
    state.metrics.append(MetricsRow(
        iteration=k,
        avg_trees_per_tile=state.total_instances / max(1, len(state.tiles)),
        n_single=n_single, n_multi=n_multi, n_nontree=n_nontree,
        new_instances=new_count))
    state.iteration = k
    _persist_iteration(state, k, predictions)
    if log:
        log(f"iteration {k}: {new_count} new instances, "
            f"{state.total_instances} total")
    return new_count


def run_loop(config: Config, run_dir: str | Path, tiles_dir: str | Path,
             clusters_dir: str | Path, ratings_path: str | Path,
             log=None) -> LoopState:
    """Drive the whole pipeline from initial clusters to stabilization.

    Requires human ratings covering a sample of the initial clusters (the
    rating model trains on them; every unrated initial cluster is then rated
    by the model). Resumes from the last complete iteration directory if the
    run directory already has state.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ratings_path = Path(ratings_path)
    if not ratings_path.exists():
        raise LoopError("no ratings found: run `treeloop serve` and rate "
                        "clusters first")
    store = RatingStore(ratings_path)
    if not store.rated_ids():
        raise LoopError("ratings file has no active ratings: run `treeloop "
                        "serve` and rate clusters first")

    lock = run_dir / "loop.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LoopError(f"run directory is locked by another loop: {lock}")
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)

    try:
        config.save(run_dir / "config.json")
        tiles = read_tilestore(tiles_dir)
        state = LoopState(run_dir=run_dir, config=config, tiles=tiles,
                          tiles_dir=Path(tiles_dir))
        if config.backend.command is None:
            state.features = [extract_features(t) for t in tiles]

        init_sets = [load_clusters(Path(clusters_dir) / f"{t.name}.json")
                     for t in tiles]

        rater_path = run_dir / "rater.params"
        if rater_path.exists():
            state.rater = load_rater(rater_path)
        else:
            state.rater = _train_rater_from_store(tiles, init_sets, store,
                                                  config, log=log)
            save_rater(state.rater, rater_path)

        # Resume if a complete iteration exists.
        done = sorted(int(p.name.split("_")[1]) for p in run_dir.glob("iter_*")
                      if p.is_dir() and not p.name.endswith(".tmp")
                      and (p / "metrics.csv").exists())
        if done:
            _load_iteration(state, done[-1])
            if log:
                log(f"resuming after iteration {done[-1]}")
        else:
            _initialize(state, init_sets, store, log=log)

        while True:
            stop, reason = stop_check(state)
            if stop:
                if log:
                    log(f"stop: {reason}")
                break
            run_iteration(state, log=log)

        shutil.copy(state.iter_dir(state.iteration) / "metrics.csv",
                    run_dir / "metrics.csv")
        return state
    finally:
        lock.unlink(missing_ok=True)


def _train_rater_from_store(tiles, init_sets, store: RatingStore,
                            config: Config, log=None) -> RaterNet:
    point_sets = []
    labels = []
    for tile, cs in zip(tiles, init_sets):
        pts = cluster_points(tile, cs)
        for c, pt in zip(sorted(cs, key=lambda c: c.id), pts):
            record = store.get(c.id)
            if record is not None:
                point_sets.append(pt)
                labels.append(int(record.rating))
    if not point_sets:
        raise LoopError("no rated clusters match the initial cluster set")
    net, _ = train_rater(point_sets, labels, config.rater, log=log)
    return net


def _initialize(state: LoopState, init_sets: list[ClusterSet],
                store: RatingStore, log=None) -> None:
    """Iteration 0: rate every initial cluster, build labels, train backend."""
    cfg = state.config
    ratings_all: list[int] = []
    state.labels = []
    for tile, cs in zip(state.tiles, init_sets):
        records = rate_cluster_set(state.rater, tile, cs)
        for cid in cs.ids():
            human = store.get(cid)
            if human is not None:
                records[cid] = human
        ratings_all.extend(int(records[cid].rating) for cid in cs.ids())
        state.labels.append(build_initial_labels(tile, cs, records))

    if cfg.backend.command is None:
        state.scorer = train_backend(state.tiles, state.labels,
                                     epochs=cfg.loop.init_epochs,
                                     seed=cfg.loop.seed * 100003,
                                     cfg=cfg.backend, features=state.features)
    n_single, n_multi, n_nontree = _rating_counts(ratings_all)
    state.metrics.append(MetricsRow(
        iteration=0,
        avg_trees_per_tile=state.total_instances / max(1, len(state.tiles)),
        n_single=n_single, n_multi=n_multi, n_nontree=n_nontree,
        new_instances=state.total_instances))
    state.iteration = 0
    _persist_iteration(state, 0, init_sets)
    if log:
        log(f"iteration 0: {state.total_instances} initial instances")
