"""Command line entry point.

Subcommands follow the pipeline order: synth / ingest / tile produce a
TileStore, segment-init produces the initial clusters, serve runs the human
rating API, train-rater fits the rating model, loop drives the iterative
retraining, eval compares a run against ground truth. Exit codes: 0 success,
1 usage error, 2 runtime failure. Logs go to stderr; machine-readable output
goes to files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backend import BackendError
from .cloud import IngestError, PointCloud, ingest_xyz
from .clusters import load_clusters, save_clusters
from .config import Config
from .evaluate import MatchReport, match_instances, write_report
from .labels import load_labels
from .loop import LoopError, run_loop
from .rater import save_rater, train_rater
from .ratings import RatingStore
from .synth import SceneSpec, generate_forest, write_scene
from .terrain import estimate_ground, normalize_heights, rasterize_chm
from .tiles import build_tiles, read_tilestore, write_tilestore
from .watershed import detect_maxima, smooth_chm, watershed_clusters

USAGE_ERROR = 1
RUNTIME_ERROR = 2


def log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    overrides = {}
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise KeyError(f"--set expects key=value, got {kv!r}")
        key, value = kv.split("=", 1)
        overrides[key] = value
    cfg.apply_overrides(overrides)
    return cfg


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    s = cfg.synth
    spec = SceneSpec(extent=s.extent, slope=s.slope, n_trees=args.trees or s.trees,
                     min_spacing=s.min_spacing, n_rocks=s.rocks, n_shrubs=s.shrubs,
                     density=s.density, noise=s.noise,
                     seed=args.seed if args.seed is not None else s.seed)
    scene = generate_forest(spec)
    out = write_scene(scene, args.out, tile_size=cfg.tile.size)
    log(f"synth: {len(scene.cloud)} points, {len(scene.trees)} trees, "
        f"{len(scene.confusers)} confusers -> {out}")
    return 0


def _normalize_and_store(cloud: PointCloud, out: Path, cfg: Config) -> None:
    tiles = build_tiles(cloud, cfg.tile.size)
    for tile in tiles:
        ground = estimate_ground(tile, cfg.tile.ground_cell)
        normalize_heights(tile, ground)
    write_tilestore(tiles, out)
    log(f"tiled {len(cloud)} points into {len(tiles)} tiles -> {out}")


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    cloud = ingest_xyz(args.input, fmt=args.format)
    if cloud.rejected_rows:
        log(f"ingest: rejected {cloud.rejected_rows} malformed rows")
    _normalize_and_store(cloud, Path(args.out), cfg)
    return 0


def cmd_tile(args) -> int:
    cfg = _load_config(args)
    tiles = read_tilestore(args.tiles)
    merged = PointCloud(
        x=np.concatenate([t.points.x for t in tiles]),
        y=np.concatenate([t.points.y for t in tiles]),
        z=np.concatenate([t.points.z for t in tiles]),
    )
    _normalize_and_store(merged, Path(args.out), cfg)
    return 0


def cmd_segment_init(args) -> int:
    cfg = _load_config(args)
    tiles = read_tilestore(args.tiles)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    next_id = 1
    total = 0
    for tile in tiles:
        chm = rasterize_chm(tile, cfg.tile.chm_pitch)
        smooth = smooth_chm(chm, cfg.watershed.sigma)
        seeds = detect_maxima(smooth, cfg.watershed.min_height,
                              cfg.watershed.seed_radius)
        cs = watershed_clusters(tile, smooth, seeds,
                                background=cfg.watershed.background,
                                start_id=next_id)
        if cs.ids():
            next_id = max(cs.ids()) + 1
        save_clusters(cs, out / f"{tile.name}.json")
        total += len(cs)
        log(f"segment-init: {tile.name}: {len(seeds)} seeds, {len(cs)} clusters")
    log(f"segment-init: {total} clusters -> {out}")
    return 0


def cmd_serve(args) -> int:
    from .server import build_session, serve

    cfg = _load_config(args)
    session = build_session(args.tiles, args.clusters, args.ratings,
                            sample_seed=cfg.server.sample_seed)
    port = args.port or cfg.server.port
    httpd = serve(session, port)
    log(f"serve: rating {session.total} clusters on http://127.0.0.1:{port}/ "
        f"({session.rated} already rated)")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        log("serve: stopped")
    return 0


def cmd_train_rater(args) -> int:
    from .loop import cluster_points

    cfg = _load_config(args)
    tiles = read_tilestore(args.tiles)
    store = RatingStore(args.ratings)
    point_sets, labels = [], []
    for tile in tiles:
        cs = load_clusters(Path(args.clusters) / f"{tile.name}.json")
        pts = cluster_points(tile, cs)
        for cluster, p in zip(sorted(cs, key=lambda c: c.id), pts):
            record = store.get(cluster.id)
            if record is not None:
                point_sets.append(p)
                labels.append(int(record.rating))
    if not point_sets:
        log("train-rater: no rated clusters; run `treeloop serve` first")
        return USAGE_ERROR
    log(f"train-rater: {len(point_sets)} rated clusters")
    net, history = train_rater(point_sets, labels, cfg.rater, log=log)
    save_rater(net, args.out)
    final = history[-1]
    best = max(h["val_accuracy"] for h in history)
    log(f"train-rater: best val accuracy {best:.3f} "
        f"(weighted {final['val_weighted_accuracy']:.3f}) -> {args.out}")
    if args.metrics:
        Path(args.metrics).write_text(json.dumps(history, indent=2))
    return 0


def cmd_loop(args) -> int:
    cfg = _load_config(args)
    state = run_loop(cfg, args.run, args.tiles, args.clusters, args.ratings,
                     log=log)
    log(f"loop: finished after iteration {state.iteration} with "
        f"{state.total_instances} instances -> {state.run_dir}")
    return 0


def cmd_eval(args) -> int:
    from .clusters import ClusterSet, make_cluster

    run_dir = Path(args.run)
    iters = sorted(p for p in run_dir.glob("iter_*") if p.is_dir())
    if not iters:
        log(f"eval: no completed iterations under {run_dir}; run `treeloop loop` first")
        return USAGE_ERROR
    final = iters[-1]
    tiles = read_tilestore(Path(args.gt) / "tiles")
    all_pairs = []
    per_tile = []
    for tile in tiles:
        gt = load_clusters(Path(args.gt) / "gt_clusters" / f"{tile.name}.json")
        lm = load_labels(final / "labels" / f"{tile.name}.lblm")
        pred = ClusterSet(len(tile))
        for iid in lm.instance_ids():
            pred.add(make_cluster(tile, int(iid), lm.points_of(int(iid)),
                                  source="backend"))
        report = match_instances(gt, pred)
        all_pairs.extend(report.pairs)
        per_tile.append({"tile": tile.name, "category": "",
                         "predicted": len(pred), "ground_truth": len(gt),
                         "ratio": len(pred) / len(gt) if len(gt) else 0.0})
        log(f"eval: {tile.name}: {len(pred)}/{len(gt)} instances, "
            f"detection {report.detection_rate:.2%}")
    combined = MatchReport(pairs=all_pairs)
    out = Path(args.out or run_dir / "eval")
    write_report(out, combined, counts=per_tile,
                 extra={"iteration_dir": final.name})
    metrics_src = final / "metrics.csv"
    if metrics_src.exists():
        (out / "loop_metrics.csv").write_bytes(metrics_src.read_bytes())
    log(f"eval: detection rate {combined.detection_rate:.2%} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treeloop",
        description="Weakly-supervised tree instance segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. watershed.sigma=1.5")

    p = sub.add_parser("synth", help="generate a synthetic forest scene")
    p.add_argument("--out", required=True)
    p.add_argument("--trees", type=int)
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse xyz/csv points into a tile store")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["xyz", "csv"])
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("tile", help="re-tile an existing tile store")
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("segment-init", help="watershed initial segmentation")
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_segment_init)

    p = sub.add_parser("serve", help="run the human rating service")
    p.add_argument("--tiles", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--port", type=int)
    common(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("train-rater", help="train the rating model on human ratings")
    p.add_argument("--tiles", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="write per-epoch metrics JSON here")
    common(p)
    p.set_defaults(func=cmd_train_rater)

    p = sub.add_parser("loop", help="run the iterative rate-retrain loop")
    p.add_argument("--run", required=True)
    p.add_argument("--tiles", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--ratings", required=True)
    common(p)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("eval", help="evaluate a run against ground truth")
    p.add_argument("--run", required=True)
    p.add_argument("--gt", required=True, help="scene directory with gt_clusters/")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code else 0
    try:
        return args.func(args)
    except (IngestError, KeyError, ValueError, LoopError) as exc:
        log(f"error: {exc}")
        return USAGE_ERROR
    except (BackendError, OSError) as exc:
        log(f"runtime failure: {exc}")
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
