/**
 * Prompt construction: canvas-to-image coordinates, stroke decimation and
 * the JSON bodies the segmentation service expects.
 */
/** Map canvas coordinates to integer image pixels (viewport may be scaled). */
export function canvasToImage(x, y, canvasW, canvasH, imageW, imageH) {
    const px = Math.min(imageW - 1, Math.max(0, Math.floor((x * imageW) / canvasW)));
    const py = Math.min(imageH - 1, Math.max(0, Math.floor((y * imageH) / canvasH)));
    return [px, py];
}
function dist(a, b) {
    return Math.hypot(a[0] - b[0], a[1] - b[1]);
}
export function strokeLength(points) {
    let total = 0;
    for (let i = 1; i < points.length; i++)
        total += dist(points[i - 1], points[i]);
    return total;
}
/**
 * Polyline decimation: drop points closer than `minDist` to the last kept
 * one (endpoints always kept). With the default spacing a stroke of length
 * L keeps at least L/2 vertices, so the server-side rasterizer can
 * reconstruct the full line.
 */
export function decimateStroke(points, minDist = 2) {
    if (points.length <= 2)
        return points.slice();
    const kept = [points[0]];
    for (let i = 1; i < points.length - 1; i++) {
        if (dist(kept[kept.length - 1], points[i]) >= minDist)
            kept.push(points[i]);
    }
    kept.push(points[points.length - 1]);
    return kept;
}
export function buildPointPrompt(view, positives, negatives) {
    if (positives.length === 0)
        throw new Error('at least one positive point is required');
    const body = { view, kind: 'points', positives };
    if (negatives.length > 0)
        body.negatives = negatives;
    return body;
}
export function buildScribblePrompt(view, positives, negatives) {
    const pos = positives.filter((s) => s.length > 0).map((s) => decimateStroke(s));
    if (pos.length === 0)
        throw new Error('at least one positive stroke is required');
    const body = { view, kind: 'scribble', positives: pos };
    const neg = negatives.filter((s) => s.length > 0).map((s) => decimateStroke(s));
    if (neg.length > 0)
        body.negatives = neg;
    return body;
}
/** Mask prompts carry the reference mask as a base64 GSTEN tensor. */
export function buildMaskPrompt(view, maskB64, kind = 'mask') {
    if (!maskB64)
        throw new Error('mask payload is empty');
    return { view, kind, positives: { data_b64: maskB64 } };
}
