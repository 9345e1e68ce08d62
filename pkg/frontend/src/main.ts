/** DOM wiring for the annotation page. */

import { ApiClient, ApiError, SceneInfo } from './api.js';
import {
  buildMaskPrompt, buildPointPrompt, buildScribblePrompt, canvasToImage,
} from './prompts.js';
import { AnnotationState, NEGATIVE_COLOR, POSITIVE_COLOR, Tool } from './state.js';
import { encodeMask, decodeTensor, toBase64 } from './tensor.js';

const api = new ApiClient('');
let state: AnnotationState | null = null;
let scene: SceneInfo | null = null;
let imageSize: [number, number] = [0, 0]; // [w, h]

const $ = (id: string) => document.getElementById(id)!;

function toast(message: string): void {
  const el = $('toast');
  el.textContent = message;
  el.classList.add('visible');
  setTimeout(() => el.classList.remove('visible'), 4000);
}

function setBusy(busy: boolean): void {
  if (state) state.busy = busy;
  document.querySelectorAll('button, select').forEach((el) => {
    (el as HTMLButtonElement).disabled = busy;
  });
}

async function refreshImage(): Promise<void> {
  if (!scene || !state) return;
  const overlay = state.currentSegmentation ?? undefined;
  const img = $('render') as HTMLImageElement;
  const url = api.renderUrl(scene.id, state.view, overlay);
  await new Promise<void>((resolve, reject) => {
    const probe = new Image();
    probe.onload = () => {
      img.src = probe.src; // swap only after the new frame loaded
      imageSize = [probe.naturalWidth, probe.naturalHeight];
      resolve();
    };
    probe.onerror = () => reject(new Error('render failed'));
    probe.src = `${url}&_=${Date.now()}`;
  });
  drawMarks();
}

function drawMarks(): void {
  if (!state) return;
  const img = $('render') as HTMLImageElement;
  const canvas = $('marks') as HTMLCanvasElement;
  canvas.width = img.clientWidth;
  canvas.height = img.clientHeight;
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const [iw, ih] = imageSize;
  if (iw === 0) return;
  const sx = canvas.width / iw;
  const sy = canvas.height / ih;

  const dot = (p: [number, number], color: string) => {
    ctx.fillStyle = color;
    ctx.beginPath();
    ctx.arc((p[0] + 0.5) * sx, (p[1] + 0.5) * sy, 4, 0, 2 * Math.PI);
    ctx.fill();
  };
  const polyline = (pts: [number, number][], color: string) => {
    if (pts.length === 0) return;
    ctx.strokeStyle = color;
    ctx.lineWidth = 3;
    ctx.beginPath();
    ctx.moveTo((pts[0][0] + 0.5) * sx, (pts[0][1] + 0.5) * sy);
    pts.slice(1).forEach((p) => ctx.lineTo((p[0] + 0.5) * sx, (p[1] + 0.5) * sy));
    ctx.stroke();
  };

  state.posPoints.forEach((p) => dot(p, POSITIVE_COLOR));
  state.negPoints.forEach((p) => dot(p, NEGATIVE_COLOR));
  state.posStrokes.forEach((s) => polyline(s, POSITIVE_COLOR));
  state.negStrokes.forEach((s) => polyline(s, NEGATIVE_COLOR));
  if (state.strokeInProgress) {
    const color = state.tool === 'scribble-neg' ? NEGATIVE_COLOR : POSITIVE_COLOR;
    polyline(state.strokeInProgress, color);
  }
}

function updatePanel(): void {
  const summary = state?.lastSummary;
  if (!summary) {
    $('panel-counts').textContent = 'no segmentation yet';
    $('panel-timing').textContent = '';
    ($('export') as HTMLAnchorElement).classList.add('hidden');
    return;
  }
  const c = summary.counts;
  $('panel-counts').textContent =
    `raw ${c.raw ?? '-'} / filtered ${c.filtered ?? '-'} / grown ${c.grown ?? '-'}`;
  const t = summary.timing_ms;
  $('panel-timing').textContent =
    `retrieve ${t.retrieving_ms.toFixed(1)} ms | filter ${t.filtering_ms.toFixed(1)} ms `
    + `| grow ${t.growing_ms.toFixed(1)} ms | total ${t.total_ms.toFixed(1)} ms`;
  const link = $('export') as HTMLAnchorElement;
  link.href = api.exportUrl(scene!.id, summary.segmentation_id);
  link.classList.remove('hidden');
}

function eventPixel(ev: MouseEvent): [number, number] {
  const canvas = $('marks') as HTMLCanvasElement;
  const rect = canvas.getBoundingClientRect();
  return canvasToImage(
    ev.clientX - rect.left, ev.clientY - rect.top,
    rect.width, rect.height, imageSize[0], imageSize[1],
  );
}

async function submitPrompt(): Promise<void> {
  if (!state || !scene) return;
  if (!state.canSubmit()) {
    toast('add at least one positive point or stroke first');
    return;
  }
  let prompt;
  try {
    if (state.posStrokes.length > 0 || state.negStrokes.length > 0) {
      prompt = buildScribblePrompt(state.view, state.posStrokes, state.negStrokes);
    } else {
      prompt = buildPointPrompt(state.view, state.posPoints, state.negPoints);
    }
  } catch (err) {
    toast(String(err));
    return;
  }
  setBusy(true);
  try {
    const summary = await api.segment(scene.id, prompt);
    state.onSubmitted(summary);
    await refreshImage();
    updatePanel();
  } catch (err) {
    state.onError();
    const detail = err instanceof ApiError ? err.message : String(err);
    toast(`segmentation failed: ${detail}`);
  } finally {
    setBusy(false);
    drawMarks();
  }
}

async function submitMaskFile(file: File): Promise<void> {
  if (!state || !scene) return;
  setBusy(true);
  try {
    const raw = new Uint8Array(await file.arrayBuffer());
    decodeTensor(raw); // validate before shipping
    const prompt = buildMaskPrompt(state.view, toBase64(raw));
    const summary = await api.segment(scene.id, prompt);
    state.onSubmitted(summary);
    await refreshImage();
    updatePanel();
  } catch (err) {
    state.onError();
    toast(`mask prompt failed: ${err instanceof ApiError ? err.message : err}`);
  } finally {
    setBusy(false);
  }
}

async function undo(): Promise<void> {
  if (!state || !scene) return;
  setBusy(true);
  try {
    const result = await api.undo(scene.id);
    state.onUndone(result.current);
    await refreshImage();
    updatePanel();
  } catch (err) {
    state.onError();
    toast(`nothing to undo`);
  } finally {
    setBusy(false);
  }
}

async function init(): Promise<void> {
  const scenes = await api.listScenes();
  if (scenes.length === 0) {
    toast('no scenes loaded; POST /scenes first');
    return;
  }
  scene = scenes[0];
  state = new AnnotationState(scene.views[0], scene.views);

  const viewSelect = $('view') as HTMLSelectElement;
  scene.views.forEach((v) => {
    const opt = document.createElement('option');
    opt.value = v;
    opt.textContent = v;
    viewSelect.appendChild(opt);
  });
  viewSelect.onchange = async () => {
    state!.setView(viewSelect.value);
    await refreshImage();
  };

  document.querySelectorAll('input[name=tool]').forEach((el) => {
    el.addEventListener('change', () => {
      state!.setTool((el as HTMLInputElement).value as Tool);
    });
  });

  const canvas = $('marks') as HTMLCanvasElement;
  let drawing = false;
  canvas.onmousedown = (ev) => {
    if (!state || state.busy) return;
    const p = eventPixel(ev);
    if (state.tool === 'pos-point' || state.tool === 'neg-point') {
      state.addPoint(p);
    } else {
      drawing = true;
      state.beginStroke(p);
    }
    drawMarks();
  };
  canvas.onmousemove = (ev) => {
    if (!drawing || !state) return;
    state.extendStroke(eventPixel(ev));
    drawMarks();
  };
  const stop = () => {
    if (drawing && state) {
      state.endStroke();
      drawing = false;
      drawMarks();
    }
  };
  canvas.onmouseup = stop;
  canvas.onmouseleave = stop;

  ($('segment') as HTMLButtonElement).onclick = () => void submitPrompt();
  ($('undo') as HTMLButtonElement).onclick = () => void undo();
  ($('clear') as HTMLButtonElement).onclick = () => {
    state!.clearPending();
    drawMarks();
  };
  ($('mask-file') as HTMLInputElement).onchange = (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (file) void submitMaskFile(file);
  };

  await refreshImage();
  updatePanel();
}

init().catch((err) => toast(`init failed: ${err}`));
