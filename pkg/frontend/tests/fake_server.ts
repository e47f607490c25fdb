/** In-memory stand-in for the rating service, mounted on global fetch. */

import { ClusterPayload } from "../src/api.js";

export interface FakeServer {
  ratings: Map<number, string>;
  history: Array<{ kind: "rate" | "undo"; id: number; klass?: string }>;
  failNext: { count: number };
  install(): void;
}

export function makeCluster(id: number, n = 12): ClusterPayload {
  const x: number[] = [];
  const y: number[] = [];
  const hag: number[] = [];
  for (let i = 0; i < n; i++) {
    x.push(id * 30 + Math.cos(i) * 2);
    y.push(id * 30 + Math.sin(i) * 2);
    hag.push((i / n) * 8);
  }
  return {
    id,
    points: { x, y, hag },
    centroid: [id * 30, id * 30, 3],
    bbox: { min: [id * 30 - 2, id * 30 - 2, 0], max: [id * 30 + 2, id * 30 + 2, 8] },
  };
}

export function fakeServer(clusterIds: number[]): FakeServer {
  const ratings = new Map<number, string>();
  const order = [...clusterIds];
  const undoStack: number[] = [];
  const history: FakeServer["history"] = [];
  const failNext = { count: 0 };

  async function handler(input: RequestInfo | URL, init?: RequestInit):
      Promise<Response> {
    const url = typeof input === "string" ? input : input.toString();
    if (failNext.count > 0) {
      failNext.count -= 1;
      throw new TypeError("network down");
    }
    const json = (status: number, body: unknown) =>
      new Response(status === 204 ? null : JSON.stringify(body), { status });

    if (url.includes("/api/session")) {
      return json(200, {
        total: order.length,
        rated: ratings.size,
        remaining: order.length - ratings.size,
      });
    }
    if (url.includes("/api/clusters/next")) {
      const skipMatch = url.match(/skip=([\d,]+)/);
      const skip = new Set(
        skipMatch ? skipMatch[1].split(",").map(Number) : [],
      );
      const next = order.find((id) => !ratings.has(id) && !skip.has(id));
      return next === undefined ? json(204, null) : json(200, { id: next });
    }
    const rateMatch = url.match(/\/api\/clusters\/(\d+)\/rating/);
    if (rateMatch && init?.method === "POST") {
      const id = Number(rateMatch[1]);
      if (!order.includes(id)) return json(404, { error: "unknown" });
      const klass = JSON.parse(String(init.body))["class"];
      ratings.set(id, klass);
      undoStack.push(id);
      history.push({ kind: "rate", id, klass });
      return json(200, { id, class: klass });
    }
    if (url.includes("/api/ratings/undo")) {
      const id = undoStack.pop();
      if (id === undefined) return json(200, { undone: null });
      ratings.delete(id);
      history.push({ kind: "undo", id });
      return json(200, { undone: id });
    }
    const clusterMatch = url.match(/\/api\/clusters\/(\d+)$/);
    if (clusterMatch) {
      const id = Number(clusterMatch[1]);
      if (!order.includes(id)) return json(404, { error: "unknown" });
      return json(200, makeCluster(id));
    }
    return json(404, { error: "no route" });
  }

  return {
    ratings,
    history,
    failNext,
    install() {
      globalThis.fetch = handler as typeof fetch;
    },
  };
}
