import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { RatingSession, SessionState } from "../src/session.js";
import { fakeServer } from "./fake_server.js";

function makeSession(ids: number[]) {
  const server = fakeServer(ids);
  server.install();
  const states: SessionState[] = [];
  const session = new RatingSession(new ApiClient(""), {
    onState: (s) => states.push(s),
  });
  return { server, session, states };
}

describe("RatingSession", () => {
  it("loads the first unrated cluster on start", async () => {
    const { session } = makeSession([4, 7, 9]);
    await session.start();
    expect(session.state).toBe("viewing");
    expect(session.current?.id).toBe(4);
    expect(session.progress).toEqual({ total: 3, rated: 0, remaining: 3 });
  });

  it("rating advances to the next cluster and updates counters", async () => {
    const { server, session } = makeSession([1, 2]);
    await session.start();
    await session.rate("single");
    expect(server.ratings.get(1)).toBe("single");
    expect(session.current?.id).toBe(2);
    expect(session.progress.rated).toBe(1);
  });

  it("finishes with the completion state", async () => {
    const { session } = makeSession([1]);
    await session.start();
    await session.handleKey("3");
    expect(session.state).toBe("done");
    expect(session.current).toBeNull();
  });

  it("ignores rating keys while a request is pending", async () => {
    const { server, session } = makeSession([1, 2, 3]);
    await session.start();
    // Fire two keypresses back to back; the second must be swallowed.
    const first = session.rate("single");
    const second = session.rate("multi");
    await Promise.all([first, second]);
    expect(server.ratings.size).toBe(1);
    expect(server.ratings.get(1)).toBe("single");
  });

  it("undo returns to the previous cluster and decrements progress", async () => {
    const { server, session } = makeSession([5, 6]);
    await session.start();
    await session.rate("multi");
    expect(session.progress.rated).toBe(1);
    await session.undo();
    expect(server.ratings.size).toBe(0);
    expect(session.current?.id).toBe(5);
    expect(session.progress.rated).toBe(0);
    expect(session.state).toBe("viewing");
  });

  it("skip defers a cluster to the end of the session", async () => {
    const { server, session } = makeSession([1, 2]);
    await session.start();
    await session.handleKey(" ");      // skip cluster 1
    expect(session.current?.id).toBe(2);
    await session.rate("single");
    // Only the skipped one remains; it must come back.
    expect(session.current?.id).toBe(1);
    await session.rate("non_tree");
    expect(session.state).toBe("done");
    expect(server.ratings.get(1)).toBe("non_tree");
  });

  it("network failure rolls back optimistic progress", async () => {
    const { server, session } = makeSession([1, 2]);
    await session.start();
    server.failNext.count = 1;
    await session.rate("single");
    expect(session.state).toBe("error");
    expect(session.progress.rated).toBe(0);   // rolled back
    expect(server.ratings.size).toBe(0);
    // Retry recovers the same cluster.
    await session.retry();
    expect(session.state).toBe("viewing");
    expect(session.current?.id).toBe(1);
  });

  it("a fresh session resumes after earlier ratings (refresh survives)", async () => {
    const { server, session } = makeSession([1, 2, 3]);
    await session.start();
    await session.rate("single");
    // Simulate a page refresh: brand-new session over the same server state.
    const resumed = new RatingSession(new ApiClient(""));
    await resumed.start();
    expect(resumed.progress.rated).toBe(1);
    expect(resumed.current?.id).toBe(2);
    expect(server.ratings.size).toBe(1);
  });

  it("unknown keys do nothing", async () => {
    const { server, session } = makeSession([1]);
    await session.start();
    await session.handleKey("x");
    await session.handleKey("Enter");
    expect(server.ratings.size).toBe(0);
    expect(session.state).toBe("viewing");
  });
});
