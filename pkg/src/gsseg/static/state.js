/**
 * Client-side annotation state: the current tool, pending clicks and
 * strokes, and the last server response. All displayed numbers come from
 * the server; nothing is computed here beyond bookkeeping.
 */
export const POSITIVE_COLOR = '#2255ee'; // positive prompts are blue
export const NEGATIVE_COLOR = '#ee2222'; // negative prompts are red
export class AnnotationState {
    views;
    view;
    tool = 'pos-point';
    posPoints = [];
    negPoints = [];
    posStrokes = [];
    negStrokes = [];
    activeStroke = null;
    busy = false;
    lastSummary = null;
    history = [];
    constructor(view, views = []) {
        this.views = views;
        if (views.length > 0 && !views.includes(view)) {
            throw new Error(`view ${view} not in scene view list`);
        }
        this.view = view;
    }
    setView(view) {
        if (this.views.length > 0 && !this.views.includes(view)) {
            throw new Error(`view ${view} not in scene view list`);
        }
        this.view = view;
        this.clearPending();
    }
    setTool(tool) {
        this.tool = tool;
        this.activeStroke = null;
    }
    addPoint(p) {
        if (this.busy)
            return;
        if (this.tool === 'pos-point')
            this.posPoints.push(p);
        else if (this.tool === 'neg-point')
            this.negPoints.push(p);
    }
    beginStroke(p) {
        if (this.busy)
            return;
        if (this.tool !== 'scribble-pos' && this.tool !== 'scribble-neg')
            return;
        this.activeStroke = [p];
    }
    extendStroke(p) {
        if (this.activeStroke)
            this.activeStroke.push(p);
    }
    endStroke() {
        if (!this.activeStroke || this.activeStroke.length === 0) {
            this.activeStroke = null;
            return;
        }
        if (this.tool === 'scribble-pos')
            this.posStrokes.push(this.activeStroke);
        else if (this.tool === 'scribble-neg')
            this.negStrokes.push(this.activeStroke);
        this.activeStroke = null;
    }
    get strokeInProgress() {
        return this.activeStroke;
    }
    hasPositive() {
        return this.posPoints.length > 0 || this.posStrokes.some((s) => s.length > 0);
    }
    canSubmit() {
        return !this.busy && this.hasPositive();
    }
    clearPending() {
        this.posPoints = [];
        this.negPoints = [];
        this.posStrokes = [];
        this.negStrokes = [];
        this.activeStroke = null;
    }
    /** Pending marks are cleared once the server accepted a prompt. */
    onSubmitted(summary) {
        this.lastSummary = summary;
        this.history.push(summary.segmentation_id);
        this.clearPending();
        this.busy = false;
    }
    onError() {
        this.busy = false;
    }
    onUndone(current) {
        this.history.pop();
        if (current === null)
            this.lastSummary = null;
        this.busy = false;
    }
    get currentSegmentation() {
        return this.history.length > 0 ? this.history[this.history.length - 1] : null;
    }
}
