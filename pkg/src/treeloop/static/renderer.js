/** Canvas point-sprite renderer with a height colormap and a meter scale bar.
 *
 * Color encodes height above ground by default even when rgb is present:
 * geometry is the reliable cue under arbitrary lighting. No-ops cleanly when
 * a 2D context is unavailable (headless tests).
 */
import { OrbitCamera } from "./camera.js";
const BACKGROUND = "#10141a";
/** Dark-blue to yellow-green ramp over t in [0, 1]. */
export function heightColor(t) {
    const c = Math.min(1, Math.max(0, t));
    const r = Math.round(40 + 215 * c * c);
    const g = Math.round(60 + 185 * c);
    const b = Math.round(140 - 100 * c);
    return `rgb(${r},${g},${b})`;
}
export class ClusterRenderer {
    constructor(canvas) {
        this.canvas = canvas;
        this.camera = new OrbitCamera();
        this.ctx = canvas.getContext ? canvas.getContext("2d") : null;
    }
    get active() {
        return this.ctx !== null;
    }
    fitTo(cluster) {
        const hag = cluster.points.hag;
        this.camera.fitTo([cluster.bbox.min[0], cluster.bbox.min[1], Math.min(...hag)], [cluster.bbox.max[0], cluster.bbox.max[1], Math.max(...hag)]);
    }
    draw(cluster) {
        const ctx = this.ctx;
        if (!ctx)
            return;
        const { width, height } = this.canvas;
        ctx.fillStyle = BACKGROUND;
        ctx.fillRect(0, 0, width, height);
        if (!cluster)
            return;
        const { x, y, hag } = cluster.points;
        const projected = this.camera.project(x, y, hag, width, height);
        const lo = Math.min(...hag);
        const hi = Math.max(...hag);
        const span = Math.max(hi - lo, 0.5);
        const order = projected
            .map((p, i) => ({ p, i }))
            .sort((a, b) => b.p.depth - a.p.depth);
        for (const { p, i } of order) {
            if (p.sx < -4 || p.sx > width + 4 || p.sy < -4 || p.sy > height + 4) {
                continue;
            }
            ctx.fillStyle = heightColor((hag[i] - lo) / span);
            const size = Math.min(6, Math.max(1.2, 80 / p.depth));
            ctx.fillRect(p.sx - size / 2, p.sy - size / 2, size, size);
        }
        this.drawScaleBar(ctx, width, height);
    }
    drawScaleBar(ctx, width, height) {
        const ppm = this.camera.pixelsPerMeter(height);
        // Pick a bar length of 1/2/5/10/20 m that fits ~150 px.
        const options = [1, 2, 5, 10, 20, 50];
        let meters = options[0];
        for (const m of options) {
            if (m * ppm <= 160)
                meters = m;
        }
        const px = meters * ppm;
        const x0 = 16;
        const y0 = height - 20;
        ctx.strokeStyle = "#e8e8e8";
        ctx.lineWidth = 2;
        ctx.beginPath();
        ctx.moveTo(x0, y0);
        ctx.lineTo(x0 + px, y0);
        ctx.moveTo(x0, y0 - 5);
        ctx.lineTo(x0, y0 + 5);
        ctx.moveTo(x0 + px, y0 - 5);
        ctx.lineTo(x0 + px, y0 + 5);
        ctx.stroke();
        ctx.fillStyle = "#e8e8e8";
        ctx.font = "12px sans-serif";
        ctx.fillText(`${meters} m`, x0 + px / 2 - 10, y0 - 8);
    }
}
