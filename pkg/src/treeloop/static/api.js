/** Typed client for the rating service REST API. */
export class ApiError extends Error {
    constructor(status, message) {
        super(message);
        this.status = status;
    }
}
async function asJson(resp) {
    if (!resp.ok) {
        throw new ApiError(resp.status, `${resp.status} ${resp.statusText}`);
    }
    return (await resp.json());
}
export class ApiClient {
    constructor(base = "") {
        this.base = base;
    }
    session() {
        return fetch(`${this.base}/api/session`).then((r) => asJson(r));
    }
    /** Next unrated cluster id, excluding locally skipped ones; null when done. */
    async next(skip = []) {
        const query = skip.length ? `?skip=${skip.join(",")}` : "";
        const resp = await fetch(`${this.base}/api/clusters/next${query}`);
        if (resp.status === 204)
            return null;
        const body = await asJson(resp);
        return body.id;
    }
    cluster(id) {
        return fetch(`${this.base}/api/clusters/${id}`).then((r) => asJson(r));
    }
    async rate(id, klass) {
        const resp = await fetch(`${this.base}/api/clusters/${id}/rating`, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify({ class: klass }),
        });
        await asJson(resp);
    }
    async undo() {
        const resp = await fetch(`${this.base}/api/ratings/undo`, { method: "POST" });
        const body = await asJson(resp);
        return body.undone;
    }
}
