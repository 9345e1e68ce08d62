/** Thin typed client for the segmentation service's REST API. */

import type { PromptJson } from './prompts.js';

export interface SceneInfo {
  id: string;
  n_gaussians: number;
  views: string[];
  trained: boolean;
}

export interface TimingMs {
  retrieving_ms: number;
  filtering_ms: number;
  growing_ms: number;
  total_ms: number;
}

export interface SegmentSummary {
  segmentation_id: string;
  counts: Record<string, number>;
  timing_ms: TimingMs;
  metric: string;
}

export class ApiError extends Error {
  constructor(public status: number, public detail: unknown) {
    super(typeof detail === 'string' ? detail : JSON.stringify(detail));
  }
}

async function expectJson(resp: Response): Promise<any> {
  if (!resp.ok) {
    let detail: unknown = resp.statusText;
    try {
      detail = (await resp.json()).detail;
    } catch { /* not json */ }
    throw new ApiError(resp.status, detail);
  }
  return resp.json();
}

export class ApiClient {
  constructor(private base: string = '') {}

  async listScenes(): Promise<SceneInfo[]> {
    const body = await expectJson(await fetch(`${this.base}/scenes`));
    return body.scenes;
  }

  async loadScene(paths: Record<string, string>): Promise<SceneInfo> {
    return expectJson(await fetch(`${this.base}/scenes`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(paths),
    }));
  }

  renderUrl(sceneId: string, view: string, overlay?: string): string {
    const params = new URLSearchParams({ view });
    if (overlay) params.set('overlay', overlay);
    return `${this.base}/scenes/${sceneId}/render?${params}`;
  }

  async fetchRender(sceneId: string, view: string, overlay?: string): Promise<Uint8Array> {
    const resp = await fetch(this.renderUrl(sceneId, view, overlay));
    if (!resp.ok) throw new ApiError(resp.status, await resp.text());
    return new Uint8Array(await resp.arrayBuffer());
  }

  async segment(sceneId: string, prompt: PromptJson): Promise<SegmentSummary> {
    return expectJson(await fetch(`${this.base}/scenes/${sceneId}/segment`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(prompt),
    }));
  }

  async undo(sceneId: string): Promise<{ undone: string; current: string | null }> {
    return expectJson(await fetch(`${this.base}/scenes/${sceneId}/segmentation`, {
      method: 'DELETE',
    }));
  }

  exportUrl(sceneId: string, segmentationId: string): string {
    return `${this.base}/scenes/${sceneId}/segmentations/${segmentationId}/export`;
  }
}
