/** Thin typed client for the segmentation service's REST API. */
export class ApiError extends Error {
    status;
    detail;
    constructor(status, detail) {
        super(typeof detail === 'string' ? detail : JSON.stringify(detail));
        this.status = status;
        this.detail = detail;
    }
}
async function expectJson(resp) {
    if (!resp.ok) {
        let detail = resp.statusText;
        try {
            detail = (await resp.json()).detail;
        }
        catch { /* not json */ }
        throw new ApiError(resp.status, detail);
    }
    return resp.json();
}
export class ApiClient {
    base;
    constructor(base = '') {
        this.base = base;
    }
    async listScenes() {
        const body = await expectJson(await fetch(`${this.base}/scenes`));
        return body.scenes;
    }
    async loadScene(paths) {
        return expectJson(await fetch(`${this.base}/scenes`, {
            method: 'POST',
            headers: { 'content-type': 'application/json' },
            body: JSON.stringify(paths),
        }));
    }
    renderUrl(sceneId, view, overlay) {
        const params = new URLSearchParams({ view });
        if (overlay)
            params.set('overlay', overlay);
        return `${this.base}/scenes/${sceneId}/render?${params}`;
    }
    async fetchRender(sceneId, view, overlay) {
        const resp = await fetch(this.renderUrl(sceneId, view, overlay));
        if (!resp.ok)
            throw new ApiError(resp.status, await resp.text());
        return new Uint8Array(await resp.arrayBuffer());
    }
    async segment(sceneId, prompt) {
        return expectJson(await fetch(`${this.base}/scenes/${sceneId}/segment`, {
            method: 'POST',
            headers: { 'content-type': 'application/json' },
            body: JSON.stringify(prompt),
        }));
    }
    async undo(sceneId) {
        return expectJson(await fetch(`${this.base}/scenes/${sceneId}/segmentation`, {
            method: 'DELETE',
        }));
    }
    exportUrl(sceneId, segmentationId) {
        return `${this.base}/scenes/${sceneId}/segmentations/${segmentationId}/export`;
    }
}
