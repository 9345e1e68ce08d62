/**
 * Client-side annotation state: the current tool, pending clicks and
 * strokes, and the last server response. All displayed numbers come from
 * the server; nothing is computed here beyond bookkeeping.
 */

import type { Point } from './prompts.js';
import type { SegmentSummary } from './api.js';

export type Tool = 'pos-point' | 'neg-point' | 'scribble-pos' | 'scribble-neg' | 'mask-upload';

export const POSITIVE_COLOR = '#2255ee'; // positive prompts are blue
export const NEGATIVE_COLOR = '#ee2222'; // negative prompts are red

export class AnnotationState {
  view: string;
  tool: Tool = 'pos-point';
  posPoints: Point[] = [];
  negPoints: Point[] = [];
  posStrokes: Point[][] = [];
  negStrokes: Point[][] = [];
  private activeStroke: Point[] | null = null;
  busy = false;
  lastSummary: SegmentSummary | null = null;
  history: string[] = [];

  constructor(view: string, public views: string[] = []) {
    if (views.length > 0 && !views.includes(view)) {
      throw new Error(`view ${view} not in scene view list`);
    }
    this.view = view;
  }

  setView(view: string): void {
    if (this.views.length > 0 && !this.views.includes(view)) {
      throw new Error(`view ${view} not in scene view list`);
    }
    this.view = view;
    this.clearPending();
  }

  setTool(tool: Tool): void {
    this.tool = tool;
    this.activeStroke = null;
  }

  addPoint(p: Point): void {
    if (this.busy) return;
    if (this.tool === 'pos-point') this.posPoints.push(p);
    else if (this.tool === 'neg-point') this.negPoints.push(p);
  }

  beginStroke(p: Point): void {
    if (this.busy) return;
    if (this.tool !== 'scribble-pos' && this.tool !== 'scribble-neg') return;
    this.activeStroke = [p];
  }

  extendStroke(p: Point): void {
    if (this.activeStroke) this.activeStroke.push(p);
  }

  endStroke(): void {
    if (!this.activeStroke || this.activeStroke.length === 0) {
      this.activeStroke = null;
      return;
    }
    if (this.tool === 'scribble-pos') this.posStrokes.push(this.activeStroke);
    else if (this.tool === 'scribble-neg') this.negStrokes.push(this.activeStroke);
    this.activeStroke = null;
  }

  get strokeInProgress(): Point[] | null {
    return this.activeStroke;
  }

  hasPositive(): boolean {
    return this.posPoints.length > 0 || this.posStrokes.some((s) => s.length > 0);
  }

  canSubmit(): boolean {
    return !this.busy && this.hasPositive();
  }

  clearPending(): void {
    this.posPoints = [];
    this.negPoints = [];
    this.posStrokes = [];
    this.negStrokes = [];
    this.activeStroke = null;
  }

  /** Pending marks are cleared once the server accepted a prompt. */
  onSubmitted(summary: SegmentSummary): void {
    this.lastSummary = summary;
    this.history.push(summary.segmentation_id);
    this.clearPending();
    this.busy = false;
  }

  onError(): void {
    this.busy = false;
  }

  onUndone(current: string | null): void {
    this.history.pop();
    if (current === null) this.lastSummary = null;
    this.busy = false;
  }

  get currentSegmentation(): string | null {
    return this.history.length > 0 ? this.history[this.history.length - 1] : null;
  }
}
