/** Orbit camera over a point cluster.
 *
 * Spherical state (azimuth, elevation, distance) around a target point,
 * perspective projection onto the canvas. Kept free of DOM types so the
 * session logic stays testable without a real canvas.
 */
const MIN_ELEVATION = -1.45;
const MAX_ELEVATION = 1.45;
export class OrbitCamera {
    constructor() {
        this.azimuth = 0.8;
        this.elevation = 0.45;
        this.distance = 30;
        this.target = [0, 0, 0];
        this.fov = Math.PI / 4;
    }
    fitTo(min, max) {
        this.target = [
            (min[0] + max[0]) / 2,
            (min[1] + max[1]) / 2,
            (min[2] + max[2]) / 2,
        ];
        const span = Math.max(max[0] - min[0], max[1] - min[1], max[2] - min[2], 2);
        this.distance = (span / 2) / Math.tan(this.fov / 2) * 1.6;
    }
    rotate(dAzimuth, dElevation) {
        this.azimuth += dAzimuth;
        this.elevation = Math.min(MAX_ELEVATION, Math.max(MIN_ELEVATION, this.elevation + dElevation));
    }
    zoom(factor) {
        this.distance = Math.min(500, Math.max(1, this.distance * factor));
    }
    /** Camera position in world space. */
    eye() {
        const ce = Math.cos(this.elevation);
        return [
            this.target[0] + this.distance * ce * Math.cos(this.azimuth),
            this.target[1] + this.distance * ce * Math.sin(this.azimuth),
            this.target[2] + this.distance * Math.sin(this.elevation),
        ];
    }
    /** Project world points; z is up in world, screen y grows downward. */
    project(x, y, z, width, height) {
        const eye = this.eye();
        // Forward = target - eye; right = forward x up; up' = right x forward.
        const f = normalize([
            this.target[0] - eye[0],
            this.target[1] - eye[1],
            this.target[2] - eye[2],
        ]);
        const r = normalize(cross(f, [0, 0, 1]));
        const u = cross(r, f);
        const scale = (height / 2) / Math.tan(this.fov / 2);
        const out = [];
        for (let i = 0; i < x.length; i++) {
            const dx = x[i] - eye[0];
            const dy = y[i] - eye[1];
            const dz = z[i] - eye[2];
            const cz = dx * f[0] + dy * f[1] + dz * f[2];
            const cx = dx * r[0] + dy * r[1] + dz * r[2];
            const cy = dx * u[0] + dy * u[1] + dz * u[2];
            const depth = Math.max(cz, 0.1);
            out.push({
                sx: width / 2 + (cx / depth) * scale,
                sy: height / 2 - (cy / depth) * scale,
                depth,
            });
        }
        return out;
    }
    /** Screen pixels covered by one meter at the target depth. */
    pixelsPerMeter(height) {
        return ((height / 2) / Math.tan(this.fov / 2)) / this.distance;
    }
}
function cross(a, b) {
    return [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
}
function normalize(v) {
    const n = Math.hypot(v[0], v[1], v[2]) || 1;
    return [v[0] / n, v[1] / n, v[2] / n];
}
