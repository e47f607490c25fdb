"""Rating service API tests against a live in-process server."""

import json
import threading
import urllib.error
import urllib.request

import numpy as np
import pytest

from conftest import flat_tile_with_cones
from treeloop.clusters import ClusterSet, make_cluster, save_clusters
from treeloop.ratings import RatingStore
from treeloop.server import RatingSession, make_handler, serve
from treeloop.tiles import write_tilestore


@pytest.fixture
def live_server(tmp_path):
    tile, owners = flat_tile_with_cones([(10, 10, 8.0), (25, 25, 10.0),
                                         (10, 28, 6.0)])
    cs = ClusterSet(len(tile))
    for cid, idx in enumerate(owners, start=1):
        cs.add(make_cluster(tile, cid, idx))
    store = RatingStore(tmp_path / "ratings.jsonl")
    session = RatingSession([tile], [cs], store, sample_seed=3)
    httpd = serve(session, port=0)   # ephemeral port
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{httpd.server_address[1]}"
    yield base, session, store
    httpd.shutdown()


def get(base, path):
    with urllib.request.urlopen(base + path) as resp:
        body = resp.read()
        return resp.status, json.loads(body) if body else None


def post(base, path, payload=None):
    data = json.dumps(payload or {}).encode()
    req = urllib.request.Request(base + path, data=data, method="POST",
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        return resp.status, json.loads(resp.read())


def test_session_counters(live_server):
    base, _, _ = live_server
    status, body = get(base, "/api/session")
    assert status == 200
    assert body == {"total": 3, "rated": 0, "remaining": 3}


def test_rate_one_cluster(live_server):
    base, _, store = live_server
    _, nxt = get(base, "/api/clusters/next")
    cid = nxt["id"]
    status, _ = post(base, f"/api/clusters/{cid}/rating", {"class": "single"})
    assert status == 200
    assert store.get(cid).rating.name == "SINGLE"
    _, session = get(base, "/api/session")
    assert session["rated"] == 1


def test_cluster_payload_shape(live_server):
    base, _, _ = live_server
    status, body = get(base, "/api/clusters/1")
    assert status == 200
    assert set(body) >= {"id", "points", "centroid", "bbox"}
    assert len(body["points"]["x"]) == len(body["points"]["hag"])
    assert body["bbox"]["min"][2] <= body["bbox"]["max"][2]


def test_unknown_cluster_404(live_server):
    base, _, _ = live_server
    with pytest.raises(urllib.error.HTTPError) as err:
        get(base, "/api/clusters/999")
    assert err.value.code == 404
    with pytest.raises(urllib.error.HTTPError) as err:
        post(base, "/api/clusters/999/rating", {"class": "multi"})
    assert err.value.code == 404


def test_bad_class_400(live_server):
    base, _, _ = live_server
    with pytest.raises(urllib.error.HTTPError) as err:
        post(base, "/api/clusters/1/rating", {"class": "tree?"})
    assert err.value.code == 400


def test_undo_roundtrip(live_server):
    base, _, store = live_server
    post(base, "/api/clusters/1/rating", {"class": "multi"})
    _, before = get(base, "/api/session")
    assert before["rated"] == 1
    status, body = post(base, "/api/ratings/undo")
    assert status == 200 and body["undone"] == 1
    _, after = get(base, "/api/session")
    assert after["rated"] == 0
    # Tombstone recorded, history append-only.
    lines = store.path.read_text().splitlines()
    assert len(lines) == 2


def test_next_exhausts_to_204(live_server):
    base, _, _ = live_server
    seen = []
    for _ in range(3):
        _, nxt = get(base, "/api/clusters/next")
        seen.append(nxt["id"])
        post(base, f"/api/clusters/{nxt['id']}/rating", {"class": "single"})
    assert sorted(seen) == [1, 2, 3]
    status, body = get(base, "/api/clusters/next")
    assert status == 204 and body is None


def test_next_order_deterministic(tmp_path):
    tile, owners = flat_tile_with_cones([(10, 10, 8.0), (25, 25, 10.0)])
    cs = ClusterSet(len(tile))
    for cid, idx in enumerate(owners, start=1):
        cs.add(make_cluster(tile, cid, idx))
    a = RatingSession([tile], [cs], RatingStore(tmp_path / "a.jsonl"), sample_seed=5)
    b = RatingSession([tile], [cs], RatingStore(tmp_path / "b.jsonl"), sample_seed=5)
    assert a.order == b.order


def test_static_index_served(live_server):
    base, _, _ = live_server
    with urllib.request.urlopen(base + "/") as resp:
        assert resp.status == 200
        assert b"<" in resp.read()


def test_restart_resumes(tmp_path, live_server):
    base, session, store = live_server
    post(base, "/api/clusters/2/rating", {"class": "non_tree"})
    fresh = RatingStore(store.path)
    assert fresh.get(2).rating.name == "NON_TREE"
