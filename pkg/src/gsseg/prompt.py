"""Turn user prompts into signed query vectors.

Point prompts read the rendered feature map directly; dense prompts
(scribbles, masks) are condensed with seeded K-means; guidance-based
prompts pool projected guidance features and fall back to K-means when
the pooled query does not reproduce the reference mask well enough.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensorio
from .masks import downsample_mask
from .splat import FeatureMap

PROMPT_KINDS = ("points", "scribble", "mask", "sam_based")


@dataclass
class PromptConfig:
    kmeans_clusters: int = 5
    accept_ratio: float = 0.9      # overlap needed to accept the pooled query
    kmeans_max_iter: int = 50
    kmeans_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.kmeans_clusters < 1:
            raise ValueError("kmeans_clusters must be >= 1")
        if not (0.0 <= self.accept_ratio <= 1.0):
            raise ValueError("accept_ratio must be in [0, 1]")

    def replace(self, overrides: dict) -> "PromptConfig":
        fields = {**self.__dict__, **(overrides or {})}
        return PromptConfig(**fields)


@dataclass
class Prompt:
    """Parsed user prompt for one view."""

    view: str
    kind: str
    points_pos: list = field(default_factory=list)
    points_neg: list = field(default_factory=list)
    strokes_pos: list = field(default_factory=list)
    strokes_neg: list = field(default_factory=list)
    mask_pos: np.ndarray | None = None
    mask_neg: np.ndarray | None = None
    config_overrides: dict = field(default_factory=dict)
    id: str = "prompt"

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if not self.has_positive():
            raise ValueError("prompt needs at least one positive element")

    def has_positive(self) -> bool:
        if self.kind == "points":
            return len(self.points_pos) > 0
        if self.kind == "scribble":
            return len(self.strokes_pos) > 0
        return self.mask_pos is not None and bool(np.any(self.mask_pos))


@dataclass
class QuerySet:
    """Signed query vectors plus the metric they are matched with."""

    positives: np.ndarray            # (Qp, C)
    negatives: np.ndarray | None     # (Qn, C) or None
    metric: str                      # "cosine" | "dot"
    provenance: str = ""

    def __post_init__(self):
        self.positives = np.atleast_2d(np.asarray(self.positives, dtype=np.float64))
        if self.positives.shape[0] < 1:
            raise ValueError("query set needs at least one positive query")
        if not np.all(np.isfinite(self.positives)):
            raise ValueError("positive queries contain non-finite values")
        if self.negatives is not None:
            self.negatives = np.atleast_2d(np.asarray(self.negatives, dtype=np.float64))
            if self.negatives.size == 0:
                self.negatives = None
        if self.metric not in ("cosine", "dot"):
            raise ValueError(f"unknown metric {self.metric!r}")


# ---------------------------------------------------------------------------
# Prompt JSON
# ---------------------------------------------------------------------------

def _decode_mask_ref(ref, base_dir) -> np.ndarray:
    if isinstance(ref, dict) and "path" in ref:
        path = Path(ref["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        arr = tensorio.read_tensor(path)
    elif isinstance(ref, dict) and "data_b64" in ref:
        arr = tensorio.decode_tensor(base64.b64decode(ref["data_b64"]))
    else:
        raise ValueError("mask reference must provide 'path' or 'data_b64'")
    if arr.ndim != 2:
        raise ValueError(f"prompt mask must be 2-d, got {arr.ndim}-d")
    return arr.astype(bool)


def parse_prompt(payload: dict, base_dir=None, prompt_id: str | None = None) -> Prompt:
    """Parse the documented prompt JSON schema into a Prompt."""
    if not isinstance(payload, dict):
        raise ValueError("prompt must be a JSON object")
    for key in ("view", "kind"):
        if key not in payload:
            raise ValueError(f"prompt missing field '{key}'")
    kind = payload["kind"]
    if kind not in PROMPT_KINDS:
        raise ValueError(f"prompt.kind: unknown kind {kind!r}")

    kwargs = dict(view=str(payload["view"]), kind=kind,
                  config_overrides=dict(payload.get("config", {})))
    if prompt_id is not None:
        kwargs["id"] = prompt_id

    pos = payload.get("positives")
    neg = payload.get("negatives")
    if kind == "points":
        kwargs["points_pos"] = [(int(p[0]), int(p[1])) for p in (pos or [])]
        kwargs["points_neg"] = [(int(p[0]), int(p[1])) for p in (neg or [])]
    elif kind == "scribble":
        kwargs["strokes_pos"] = [[(int(p[0]), int(p[1])) for p in s] for s in (pos or [])]
        kwargs["strokes_neg"] = [[(int(p[0]), int(p[1])) for p in s] for s in (neg or [])]
    else:
        if pos is None:
            raise ValueError("prompt.positives: mask reference required")
        kwargs["mask_pos"] = _decode_mask_ref(pos, base_dir)
        if neg is not None:
            kwargs["mask_neg"] = _decode_mask_ref(neg, base_dir)
    return Prompt(**kwargs)


def load_prompt(path, prompt_id: str | None = None) -> Prompt:
    path = Path(path)
    payload = json.loads(path.read_text())
    return parse_prompt(payload, base_dir=path.parent,
                        prompt_id=prompt_id or path.stem)


# ---------------------------------------------------------------------------
# Scribble rasterization
# ---------------------------------------------------------------------------

def _bresenham(p0, p1):
    """Integer pixels on the segment p0-p1, endpoints included."""
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize_scribble(strokes, shape) -> np.ndarray:
    """Polyline strokes -> binary mask: 1px Bresenham dilated by radius 1."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    for stroke in strokes:
        if len(stroke) == 1:
            pts = [tuple(stroke[0])]
        else:
            pts = []
            for a, b in zip(stroke[:-1], stroke[1:]):
                pts.extend(_bresenham(a, b))
        for x, y in pts:
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"scribble point ({x}, {y}) outside {w}x{h} image")
            mask[y, x] = True
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))


# ---------------------------------------------------------------------------
# K-means (seeded, kmeans++ init)
# ---------------------------------------------------------------------------

def kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 50, tol: float = 1e-6):
    """Lloyd iterations with kmeans++ seeding; empty clusters keep their
    previous centroid so runs stay deterministic."""
    n = len(x)
    k = min(k, n)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = centroids[0]
            break
        centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[i]) ** 2).sum(axis=1))

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dist, axis=1)
        new = centroids.copy()
        for j in range(k):
            sel = assign == j
            if sel.any():
                new[j] = x[sel].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < tol:
            break
    return centroids, assign


def _dedup_rows(rows: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    kept = []
    for row in rows:
        if not any(np.linalg.norm(row - k) <= tol for k in kept):
            kept.append(row)
    return np.stack(kept)


# ---------------------------------------------------------------------------
# Query generation
# ---------------------------------------------------------------------------

def _lookup_points(fmap: FeatureMap, points) -> np.ndarray:
    h, w, _ = fmap.shape
    out = []
    for x, y in points:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"point ({x}, {y}) outside {w}x{h} image")
        out.append(fmap.features[y, x])
    return np.stack(out)


def point_queries(fmap: FeatureMap, prompt: Prompt) -> QuerySet:
    """One cosine query per clicked pixel, split by click sign."""
    if prompt.kind != "points":
        raise ValueError("point_queries needs a points prompt")
    positives = _lookup_points(fmap, prompt.points_pos)
    negatives = _lookup_points(fmap, prompt.points_neg) if prompt.points_neg else None
    return QuerySet(positives, negatives, metric="cosine", provenance="points")


def _region_pixels(fmap: FeatureMap, prompt: Prompt, positive: bool) -> np.ndarray:
    h, w, _ = fmap.shape
    if prompt.kind == "scribble":
        strokes = prompt.strokes_pos if positive else prompt.strokes_neg
        if not strokes:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(rasterize_scribble(strokes, (h, w)).reshape(-1))
    mask = prompt.mask_pos if positive else prompt.mask_neg
    if mask is None:
        return np.zeros(0, dtype=np.int64)
    if mask.shape != (h, w):
        raise ValueError(f"prompt mask is {mask.shape}, view is {(h, w)}")
    return np.flatnonzero(mask.reshape(-1))


def kmeans_queries(fmap: FeatureMap, prompt: Prompt,
                   cfg: PromptConfig | None = None) -> QuerySet:
    """Cluster the covered pixels' rendered features into cosine queries.

    Pixels are visited in sorted (row-major) order so the result is
    invariant to how the prompt enumerated them.
    """
    if prompt.kind not in ("scribble", "mask"):
        raise ValueError("kmeans_queries needs a scribble or mask prompt")
    cfg = (cfg or PromptConfig()).replace(prompt.config_overrides)
    flat = fmap.features.reshape(-1, fmap.shape[2])

    def centroids_for(lin: np.ndarray):
        x = flat[np.sort(lin)]
        rng = np.random.default_rng(cfg.seed)
        cents, _ = kmeans(x, cfg.kmeans_clusters, rng,
                          max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol)
        return _dedup_rows(cents)

    pos_lin = _region_pixels(fmap, prompt, positive=True)
    if len(pos_lin) == 0:
        raise ValueError("prompt covers no positive pixels")
    positives = centroids_for(pos_lin)
    neg_lin = _region_pixels(fmap, prompt, positive=False)
    negatives = centroids_for(neg_lin) if len(neg_lin) > 0 else None
    return QuerySet(positives, negatives, metric="cosine", provenance="kmeans")


def _mask_cells(mask: np.ndarray, grid_shape) -> np.ndarray:
    """Grid cells backing a mask: NN downsample, or direct pixel->cell
    mapping when the mask is too thin to survive downsampling."""
    ds = downsample_mask(mask, grid_shape)
    if ds.any():
        return np.flatnonzero(ds.reshape(-1))
    h, w = mask.shape
    hf, wf = grid_shape
    ys, xs = np.nonzero(mask)
    cells = (ys * hf // h) * wf + (xs * wf // w)
    return np.unique(cells)


def sam_based_queries(fprime: np.ndarray, fmap: FeatureMap, m_ref: np.ndarray,
                      cfg: PromptConfig | None = None) -> QuerySet:
    """Guidance-feature queries for a reference mask (dot-product metric).

    Pools the projected guidance features over the mask; if segmenting the
    rendered map with that single query recovers >= accept_ratio of the
    reference mask, the pooled query is used, otherwise K-means centroids
    of the in-mask guidance cells are returned.
    """
    cfg = cfg or PromptConfig()
    m_ref = np.asarray(m_ref, dtype=bool)
    if not m_ref.any():
        raise ValueError("reference mask is empty")
    if m_ref.shape != fmap.shape[:2]:
        raise ValueError("reference mask does not match the rendered map")

    hf, wf, c = fprime.shape
    cells = _mask_cells(m_ref, (hf, wf))
    grid_flat = fprime.reshape(-1, c)
    pooled = grid_flat[cells].mean(axis=0)

    scores = fmap.features.reshape(-1, c) @ pooled
    m_temp = (scores > 0.0).reshape(m_ref.shape)
    overlap = np.count_nonzero(m_temp & m_ref) / np.count_nonzero(m_ref)
    if overlap >= cfg.accept_ratio:
        return QuerySet(pooled[None, :], None, metric="dot", provenance="pooled")

    rng = np.random.default_rng(cfg.seed)
    cents, _ = kmeans(grid_flat[np.sort(cells)], cfg.kmeans_clusters, rng,
                      max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol)
    return QuerySet(cents, None, metric="dot", provenance="kmeans")
