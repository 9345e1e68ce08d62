/**
 * Prompt construction: canvas-to-image coordinates, stroke decimation and
 * the JSON bodies the segmentation service expects.
 */

export type Point = [number, number];

export type PromptKind = 'points' | 'scribble' | 'mask';

export interface PromptJson {
  view: string;
  kind: PromptKind;
  positives: unknown;
  negatives?: unknown;
  config?: Record<string, unknown>;
}

/** Map canvas coordinates to integer image pixels (viewport may be scaled). */
export function canvasToImage(
  x: number, y: number,
  canvasW: number, canvasH: number,
  imageW: number, imageH: number,
): Point {
  const px = Math.min(imageW - 1, Math.max(0, Math.floor((x * imageW) / canvasW)));
  const py = Math.min(imageH - 1, Math.max(0, Math.floor((y * imageH) / canvasH)));
  return [px, py];
}

function dist(a: Point, b: Point): number {
  return Math.hypot(a[0] - b[0], a[1] - b[1]);
}

export function strokeLength(points: Point[]): number {
  let total = 0;
  for (let i = 1; i < points.length; i++) total += dist(points[i - 1], points[i]);
  return total;
}

/**
 * Polyline decimation: drop points closer than `minDist` to the last kept
 * one (endpoints always kept). With the default spacing a stroke of length
 * L keeps at least L/2 vertices, so the server-side rasterizer can
 * reconstruct the full line.
 */
export function decimateStroke(points: Point[], minDist = 2): Point[] {
  if (points.length <= 2) return points.slice();
  const kept: Point[] = [points[0]];
  for (let i = 1; i < points.length - 1; i++) {
    if (dist(kept[kept.length - 1], points[i]) >= minDist) kept.push(points[i]);
  }
  kept.push(points[points.length - 1]);
  return kept;
}

export function buildPointPrompt(
  view: string, positives: Point[], negatives: Point[],
): PromptJson {
  if (positives.length === 0) throw new Error('at least one positive point is required');
  const body: PromptJson = { view, kind: 'points', positives };
  if (negatives.length > 0) body.negatives = negatives;
  return body;
}

export function buildScribblePrompt(
  view: string, positives: Point[][], negatives: Point[][],
): PromptJson {
  const pos = positives.filter((s) => s.length > 0).map((s) => decimateStroke(s));
  if (pos.length === 0) throw new Error('at least one positive stroke is required');
  const body: PromptJson = { view, kind: 'scribble', positives: pos };
  const neg = negatives.filter((s) => s.length > 0).map((s) => decimateStroke(s));
  if (neg.length > 0) body.negatives = neg;
  return body;
}

/** Mask prompts carry the reference mask as a base64 GSTEN tensor. */
export function buildMaskPrompt(
  view: string, maskB64: string, kind: 'mask' = 'mask',
): PromptJson {
  if (!maskB64) throw new Error('mask payload is empty');
  return { view, kind, positives: { data_b64: maskB64 } };
}
