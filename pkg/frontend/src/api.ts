/** Typed client for the rating service REST API. */

export interface SessionInfo {
  total: number;
  rated: number;
  remaining: number;
}

export interface ClusterPoints {
  x: number[];
  y: number[];
  hag: number[];
  rgb?: number[][];
}

export interface ClusterPayload {
  id: number;
  points: ClusterPoints;
  centroid: number[];
  bbox: { min: number[]; max: number[] };
}

export type RatingName = "single" | "multi" | "non_tree";

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    throw new ApiError(resp.status, `${resp.status} ${resp.statusText}`);
  }
  return (await resp.json()) as T;
}

export class ApiClient {
  constructor(private readonly base: string = "") {}

  session(): Promise<SessionInfo> {
    return fetch(`${this.base}/api/session`).then((r) => asJson<SessionInfo>(r));
  }

  /** Next unrated cluster id, excluding locally skipped ones; null when done. */
  async next(skip: number[] = []): Promise<number | null> {
    const query = skip.length ? `?skip=${skip.join(",")}` : "";
    const resp = await fetch(`${this.base}/api/clusters/next${query}`);
    if (resp.status === 204) return null;
    const body = await asJson<{ id: number }>(resp);
    return body.id;
  }

  cluster(id: number): Promise<ClusterPayload> {
    return fetch(`${this.base}/api/clusters/${id}`).then((r) =>
      asJson<ClusterPayload>(r),
    );
  }

  async rate(id: number, klass: RatingName): Promise<void> {
    const resp = await fetch(`${this.base}/api/clusters/${id}/rating`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ class: klass }),
    });
    await asJson(resp);
  }

  async undo(): Promise<number | null> {
    const resp = await fetch(`${this.base}/api/ratings/undo`, { method: "POST" });
    const body = await asJson<{ undone: number | null }>(resp);
    return body.undone;
  }
}
