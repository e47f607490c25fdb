/** Bootstraps the rating tool: canvas, HUD, keyboard and mouse wiring.
 *
 * Keyboard is the primary interface: 1 = Single, 2 = Multi, 3 = Non-tree,
 * U = undo, Space = skip. Mouse drag orbits, wheel zooms.
 */

import { ApiClient, ClusterPayload } from "./api.js";
import { ClusterRenderer } from "./renderer.js";
import { RatingSession } from "./session.js";

export interface App {
  session: RatingSession;
  renderer: ClusterRenderer;
}

export function initApp(doc: Document, api?: ApiClient): App {
  const canvas = doc.getElementById("view") as HTMLCanvasElement;
  const progressEl = doc.getElementById("progress")!;
  const statusEl = doc.getElementById("status")!;
  const infoEl = doc.getElementById("cluster-info")!;

  const renderer = new ClusterRenderer(canvas);
  let shown: ClusterPayload | null = null;

  const session = new RatingSession(api ?? new ApiClient(), {
    onCluster(cluster) {
      shown = cluster;
      if (cluster) {
        renderer.fitTo(cluster);
        const n = cluster.points.x.length;
        const h = Math.max(...cluster.points.hag);
        infoEl.textContent =
          `cluster ${cluster.id}: ${n} points, top ${h.toFixed(1)} m`;
      } else {
        infoEl.textContent = "";
      }
      renderer.draw(cluster);
    },
    onProgress(info) {
      progressEl.textContent = `${info.rated} / ${info.total} rated`;
    },
    onState(state, detail) {
      if (state === "done") {
        statusEl.textContent = "all clusters rated, session complete";
        statusEl.className = "done";
      } else if (state === "error") {
        statusEl.textContent = `connection trouble (${detail ?? "?"}), press R to retry`;
        statusEl.className = "error";
      } else if (state === "loading") {
        statusEl.textContent = "loading";
        statusEl.className = "";
      } else {
        statusEl.textContent = "1 single / 2 multi / 3 non-tree / U undo / space skip";
        statusEl.className = "";
      }
    },
  });

  doc.addEventListener("keydown", (event) => {
    const key = event.key;
    if (key === "r" || key === "R") {
      if (session.state === "error") void session.retry();
      return;
    }
    void session.handleKey(key);
  });

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("mousedown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
  });
  doc.addEventListener("mouseup", () => {
    dragging = false;
  });
  doc.addEventListener("mousemove", (e) => {
    if (!dragging) return;
    renderer.camera.rotate((e.clientX - lastX) * 0.008, (e.clientY - lastY) * 0.008);
    lastX = e.clientX;
    lastY = e.clientY;
    renderer.draw(shown);
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    renderer.camera.zoom(e.deltaY > 0 ? 1.12 : 0.89);
    renderer.draw(shown);
  });

  void session.start();
  return { session, renderer };
}

declare global {
  interface Window {
    __raterApp?: App;
  }
}

if (typeof window !== "undefined" && typeof document !== "undefined"
    && document.getElementById("view")) {
  window.__raterApp = initApp(document);
}
