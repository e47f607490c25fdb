"""HTTP rating service: serves clusters to the browser tool, appends ratings.

Stdlib http.server is enough here: one operator, JSON bodies, a handful of
routes. Ratings go through a single RatingStore writer (append-only JSONL
with tombstone undo); the store replays the file on startup so a restarted
server continues exactly where the session stopped.

Routes:
    GET  /api/session                 -> {total, rated, remaining}
    GET  /api/clusters/next           -> {id} or 204 when everything is rated
    GET  /api/clusters/<id>           -> {id, points, centroid, bbox}
    POST /api/clusters/<id>/rating    -> {"class": "single"|"multi"|"non_tree"}
    POST /api/ratings/undo            -> {undone}
    GET  /...                         -> static rater UI assets
"""

from __future__ import annotations

import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .clusters import ClusterSet, load_clusters
from .ratings import NAME_CLASSES, RatingStore
from .tiles import Tile, read_tilestore

STATIC_DIR = Path(__file__).parent / "static"
CONTENT_TYPES = {".html": "text/html", ".js": "application/javascript",
                 ".css": "text/css", ".ico": "image/x-icon",
                 ".map": "application/json"}


class RatingSession:
    """Cluster registry + sampling order + the rating store, shared by handlers."""

    def __init__(self, tiles: list[Tile], cluster_sets: list[ClusterSet],
                 store: RatingStore, sample_seed: int = 0):
        self.store = store
        self.clusters: dict[int, tuple[Tile, ClusterSet]] = {}
        for tile, cs in zip(tiles, cluster_sets):
            for cid in cs.ids():
                if cid in self.clusters:
                    raise ValueError(f"cluster id {cid} appears in two tiles; "
                                     "re-run segment-init to get global ids")
                self.clusters[cid] = (tile, cs)
        rng = np.random.default_rng(sample_seed)
        ids = sorted(self.clusters)
        self.order = [ids[i] for i in rng.permutation(len(ids))]

    @property
    def total(self) -> int:
        return len(self.clusters)

    @property
    def rated(self) -> int:
        return len(self.store.rated_ids() & set(self.clusters))

    def next_unrated(self, skip: set[int] | None = None) -> int | None:
        rated = self.store.rated_ids()
        skip = skip or set()
        for cid in self.order:
            if cid not in rated and cid not in skip:
                return cid
        return None

    def payload(self, cid: int) -> dict:
        tile, cs = self.clusters[cid]
        cluster = cs[cid]
        p = tile.points
        idx = cluster.point_indices
        x = p.x[idx]
        y = p.y[idx]
        hag = p.hag[idx].astype(np.float64)
        out = {
            "id": cid,
            "points": {
                "x": np.round(x, 3).tolist(),
                "y": np.round(y, 3).tolist(),
                "hag": np.round(hag, 3).tolist(),
            },
            "centroid": [round(float(v), 3) for v in cluster.centroid],
            "bbox": {
                "min": [round(float(x.min()), 3), round(float(y.min()), 3),
                        round(float(hag.min()), 3)],
                "max": [round(float(x.max()), 3), round(float(y.max()), 3),
                        round(float(hag.max()), 3)],
            },
        }
        if p.rgb is not None:
            out["points"]["rgb"] = p.rgb[idx].tolist()
        return out


def make_handler(session: RatingSession):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):  # route logs to stderr, quiet format
            sys.stderr.write("serve: " + fmt % args + "\n")

        def _json(self, status: int, body: dict | None) -> None:
            data = b"" if body is None else json.dumps(body).encode()
            self.send_response(status)
            if body is not None:
                self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            if data:
                self.wfile.write(data)

        def do_GET(self) -> None:
            path, _, query = self.path.partition("?")
            if path == "/api/session":
                total = session.total
                rated = session.rated
                self._json(200, {"total": total, "rated": rated,
                                 "remaining": total - rated})
            elif path == "/api/clusters/next":
                skip: set[int] = set()
                for part in query.split("&"):
                    if part.startswith("skip="):
                        try:
                            skip = {int(v) for v in part[5:].split(",") if v}
                        except ValueError:
                            self._json(400, {"error": "bad skip list"})
                            return
                cid = session.next_unrated(skip)
                if cid is None:
                    self._json(204, None)
                else:
                    self._json(200, {"id": cid})
            elif path.startswith("/api/clusters/"):
                try:
                    cid = int(path.rsplit("/", 1)[1])
                except ValueError:
                    self._json(400, {"error": "bad cluster id"})
                    return
                if cid not in session.clusters:
                    self._json(404, {"error": f"unknown cluster {cid}"})
                    return
                self._json(200, session.payload(cid))
            else:
                self._static(path)

        def do_POST(self) -> None:
            path = self.path.split("?", 1)[0]
            if path == "/api/ratings/undo":
                undone = session.store.undo()
                self._json(200, {"undone": undone})
                return
            if path.startswith("/api/clusters/") and path.endswith("/rating"):
                try:
                    cid = int(path.split("/")[3])
                except (IndexError, ValueError):
                    self._json(400, {"error": "bad cluster id"})
                    return
                if cid not in session.clusters:
                    self._json(404, {"error": f"unknown cluster {cid}"})
                    return
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length) or b"{}")
                    rating = NAME_CLASSES[body["class"]]
                except (KeyError, ValueError, json.JSONDecodeError):
                    self._json(400, {"error": "body must be "
                                     '{"class": "single"|"multi"|"non_tree"}'})
                    return
                session.store.add(cid, rating, source="human")
                self._json(200, {"id": cid, "class": body["class"]})
                return
            self._json(404, {"error": "no such endpoint"})

        def _static(self, path: str) -> None:
            name = "index.html" if path in ("", "/") else path.lstrip("/")
            target = (STATIC_DIR / name).resolve()
            if not str(target).startswith(str(STATIC_DIR.resolve())) \
                    or not target.is_file():
                self._json(404, {"error": "not found"})
                return
            data = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type",
                             CONTENT_TYPES.get(target.suffix, "application/octet-stream"))
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    return Handler


def build_session(tiles_dir: str | Path, clusters_dir: str | Path,
                  ratings_path: str | Path, sample_seed: int = 0) -> RatingSession:
    tiles = read_tilestore(tiles_dir)
    cluster_sets = [load_clusters(Path(clusters_dir) / f"{t.name}.json")
                    for t in tiles]
    store = RatingStore(ratings_path)
    if store.quarantined:
        sys.stderr.write(f"serve: warning: {store.quarantined} corrupt "
                         "rating lines quarantined\n")
    return RatingSession(tiles, cluster_sets, store, sample_seed=sample_seed)


def serve(session: RatingSession, port: int,
          ready: threading.Event | None = None) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer(("127.0.0.1", port), make_handler(session))
    if ready is not None:
        ready.set()
    return server
