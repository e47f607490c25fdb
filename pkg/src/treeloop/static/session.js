/** The rating session state machine.
 *
 * One cluster on screen, at most one mutation in flight. Ratings advance
 * optimistically (the next cluster starts loading immediately) and reconcile
 * against the server response; failures roll the optimistic step back and
 * surface a retry banner instead of corrupting counters. Skipped clusters
 * are excluded from the server's "next" choice and come back once everything
 * else is rated.
 */
const KEY_RATINGS = {
    "1": "single",
    "2": "multi",
    "3": "non_tree",
};
export class RatingSession {
    constructor(api, hooks = {}) {
        this.api = api;
        this.hooks = hooks;
        this.state = "loading";
        this.current = null;
        this.progress = { total: 0, rated: 0, remaining: 0 };
        this.pending = false;
        this.skipped = [];
    }
    get busy() {
        return this.pending;
    }
    setState(state, detail) {
        this.state = state;
        this.hooks.onState?.(state, detail);
    }
    async refreshProgress() {
        this.progress = await this.api.session();
        this.hooks.onProgress?.(this.progress);
    }
    async start() {
        this.setState("loading");
        try {
            await this.refreshProgress();
            await this.loadNext();
        }
        catch (err) {
            this.setState("error", String(err));
        }
    }
    async loadNext() {
        this.setState("loading");
        try {
            let id = await this.api.next(this.skipped);
            if (id === null && this.skipped.length) {
                // Everything else is rated: revisit skipped clusters in skip order.
                this.skipped.shift();
                id = await this.api.next(this.skipped);
            }
            if (id === null) {
                this.current = null;
                this.hooks.onCluster?.(null);
                this.setState("done");
                return;
            }
            this.current = await this.api.cluster(id);
            this.hooks.onCluster?.(this.current);
            this.setState("viewing");
        }
        catch (err) {
            this.setState("error", String(err));
        }
    }
    /** Map a key press to an action; unknown keys are ignored. */
    async handleKey(key) {
        const normalized = key.length === 1 ? key.toLowerCase() : key;
        if (normalized in KEY_RATINGS) {
            await this.rate(KEY_RATINGS[normalized]);
        }
        else if (normalized === "u") {
            await this.undo();
        }
        else if (key === " " || key === "Space" || key === "Spacebar") {
            this.skip();
            await this.loadNext();
        }
    }
    async rate(klass) {
        if (this.pending || this.state !== "viewing" || !this.current)
            return;
        const cluster = this.current;
        this.pending = true;
        // Optimistic: advance counters and start fetching the next cluster.
        const before = { ...this.progress };
        this.progress = {
            total: before.total,
            rated: before.rated + 1,
            remaining: before.remaining - 1,
        };
        this.hooks.onProgress?.(this.progress);
        try {
            await this.api.rate(cluster.id, klass);
            await this.refreshProgress(); // reconcile with server truth
            await this.loadNext();
        }
        catch (err) {
            this.progress = before; // roll back the optimistic step
            this.hooks.onProgress?.(this.progress);
            this.setState("error", String(err));
        }
        finally {
            this.pending = false;
        }
    }
    async undo() {
        if (this.pending)
            return;
        this.pending = true;
        try {
            const undone = await this.api.undo();
            await this.refreshProgress();
            if (undone !== null) {
                // Redisplay the cluster whose rating was taken back.
                this.current = await this.api.cluster(undone);
                this.hooks.onCluster?.(this.current);
                this.setState("viewing");
            }
        }
        catch (err) {
            this.setState("error", String(err));
        }
        finally {
            this.pending = false;
        }
    }
    skip() {
        if (this.current && !this.skipped.includes(this.current.id)) {
            this.skipped.push(this.current.id);
        }
    }
    async retry() {
        await this.start();
    }
}
