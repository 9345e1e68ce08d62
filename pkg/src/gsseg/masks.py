"""Multi-granularity mask stacks, guidance feature maps and pixel pairs.

The mask-IoU correspondence between two pixels is the IoU of the sets of
masks containing them, remapped so that pixels which never share a mask
get -1 and pixels outside every mask contribute 0 (no supervision).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import splat, tensorio
from .errors import FormatError
from .scene import Camera, GaussianCloud, GroundTruthLabels

log = logging.getLogger(__name__)

GRANULARITY_LEVELS = ("part", "object", "coarse")


@dataclass
class MaskStack:
    """Binary masks of one view, stacked (M, H, W)."""

    view_id: str
    masks: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks).astype(bool)
        if self.masks.ndim != 3:
            raise ValueError("masks must be (M, H, W)")
        self._pixel_table = None

    @property
    def count(self) -> int:
        return self.masks.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.masks.shape[1:]

    @property
    def pixel_table(self) -> np.ndarray:
        """(H*W, M) bool: which masks contain each pixel (built lazily)."""
        if self._pixel_table is None:
            m = self.masks.reshape(self.count, -1)
            self._pixel_table = np.ascontiguousarray(m.T)
        return self._pixel_table

    def membership(self, pixel) -> tuple:
        """Sorted ids of the masks containing pixel (x, y)."""
        x, y = self._check_pixel(pixel)
        return tuple(np.flatnonzero(self.masks[:, y, x]))

    def support(self) -> np.ndarray:
        """Linear indices of pixels covered by at least one mask."""
        return np.flatnonzero(self.pixel_table.any(axis=1))

    def _check_pixel(self, pixel):
        x, y = int(pixel[0]), int(pixel[1])
        h, w = self.image_shape
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"pixel ({x}, {y}) outside {w}x{h} image")
        return x, y


@dataclass
class GuidanceFeatureMap:
    """Low-resolution guidance feature grid for one view.

    The grid aligns to the image by proportional nearest-neighbor mapping;
    `image_shape` records the (H, W) it belongs to once bound to a camera.
    """

    view_id: str
    grid: np.ndarray                      # (Hf, Wf, C_sam)
    image_shape: tuple | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[0] < 1 or self.grid.shape[1] < 1:
            raise ValueError("guidance grid must be (Hf, Wf, C)")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("guidance grid contains non-finite values")

    @property
    def grid_shape(self) -> tuple:
        return self.grid.shape[:2]

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


def corr(stack: MaskStack, p1, p2) -> float:
    """Mask-IoU correspondence of two pixels, in [-1, 1].

    0 when neither pixel is in any mask, -1 when they never share a mask,
    otherwise |intersection| / |union| of their mask sets.
    """
    x1, y1 = stack._check_pixel(p1)
    x2, y2 = stack._check_pixel(p2)
    s1 = stack.masks[:, y1, x1]
    s2 = stack.masks[:, y2, x2]
    union = int(np.count_nonzero(s1 | s2))
    if union == 0:
        return 0.0
    inter = int(np.count_nonzero(s1 & s2))
    if inter == 0:
        return -1.0
    return inter / union


def corr_linear(stack: MaskStack, p1_lin: np.ndarray, p2_lin: np.ndarray) -> np.ndarray:
    """Vectorized `corr` over pairs of linear pixel indices."""
    table = stack.pixel_table
    s1 = table[p1_lin]
    s2 = table[p2_lin]
    inter = np.count_nonzero(s1 & s2, axis=1).astype(np.float64)
    union = np.count_nonzero(s1 | s2, axis=1).astype(np.float64)
    out = np.zeros(len(p1_lin))
    nonempty = union > 0
    out[nonempty] = np.where(
        inter[nonempty] == 0, -1.0, inter[nonempty] / np.maximum(union[nonempty], 1.0)
    )
    return out


@dataclass
class PairBatch:
    """Sampled pixel pairs with their correspondence values."""

    p1: np.ndarray    # linear pixel indices
    p2: np.ndarray
    corr: np.ndarray

    def __len__(self):
        return len(self.p1)


def sample_pairs(stack: MaskStack, n: int, rng: np.random.Generator) -> PairBatch:
    """Draw pixel pairs for the correspondence loss.

    Half the pairs are uniform over the union of mask supports, half are
    stratified inside one random (non-empty) mask so positive pairs stay
    represented. Deterministic for a fixed generator state.
    """
    if n < 1:
        raise ValueError("need at least one pair")
    support = stack.support()
    if stack.count == 0 or len(support) == 0:
        raise ValueError(f"mask stack {stack.view_id} covers no pixels")

    n_uniform = n // 2
    n_strat = n - n_uniform
    p1 = np.empty(n, dtype=np.int64)
    p2 = np.empty(n, dtype=np.int64)
    p1[:n_uniform] = rng.choice(support, size=n_uniform)
    p2[:n_uniform] = rng.choice(support, size=n_uniform)

    sizes = stack.pixel_table.sum(axis=0)
    usable = np.flatnonzero(sizes > 0)
    chosen = rng.choice(usable, size=n_strat)
    for m in usable:
        rows = np.flatnonzero(chosen == m)
        if len(rows) == 0:
            continue
        pixels = np.flatnonzero(stack.pixel_table[:, m])
        draws = rng.choice(pixels, size=2 * len(rows))
        p1[n_uniform + rows] = draws[: len(rows)]
        p2[n_uniform + rows] = draws[len(rows):]

    return PairBatch(p1, p2, corr_linear(stack, p1, p2))


# ---------------------------------------------------------------------------
# File I/O (GSTEN tensors, see tensorio)
# ---------------------------------------------------------------------------

def save_stack(stack: MaskStack, path) -> None:
    tensorio.write_tensor(path, stack.masks.astype(np.uint8))


def load_stack(path, view_id: str | None = None,
               expect_shape: tuple | None = None) -> MaskStack:
    arr = tensorio.read_tensor(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: mask stack must be 3-d, got {arr.ndim}-d")
    if expect_shape is not None and arr.shape[1:] != tuple(expect_shape):
        raise FormatError(
            f"{path}: masks are {arr.shape[1:]}, camera expects {tuple(expect_shape)}"
        )
    if view_id is None:
        view_id = Path(path).name.split(".")[0]
    return MaskStack(view_id=view_id, masks=arr.astype(bool))


def save_guidance(gfm: GuidanceFeatureMap, path) -> None:
    tensorio.write_tensor(path, gfm.grid.astype(np.float32))


def load_guidance(path, view_id: str | None = None,
                  image_shape: tuple | None = None) -> GuidanceFeatureMap:
    arr = tensorio.read_tensor(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: guidance grid must be 3-d, got {arr.ndim}-d")
    if view_id is None:
        view_id = Path(path).name.split(".")[0]
    return GuidanceFeatureMap(view_id=view_id, grid=arr.astype(np.float64),
                              image_shape=image_shape)


def downsample_mask(mask: np.ndarray, grid_shape: tuple) -> np.ndarray:
    """Nearest-neighbor downsample of a binary mask onto the feature grid."""
    h, w = mask.shape
    hf, wf = grid_shape
    rows = np.minimum((np.arange(hf) + 0.5) * h / hf, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(wf) + 0.5) * w / wf, w - 1).astype(np.int64)
    return mask[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# Synthetic stacks and guidance (oracle plumbing for tests/benchmarks)
# ---------------------------------------------------------------------------

def split_parts(cloud: GaussianCloud, labels: GroundTruthLabels,
                parts_per_object: int = 2) -> np.ndarray:
    """Deterministic part labels: split each object along its widest axis.

    Returns (N,) global part ids starting at 1 (0 for background Gaussians).
    """
    part_labels = np.zeros(cloud.count, dtype=np.int64)
    next_id = 1
    for obj in labels.object_ids:
        idx = np.flatnonzero(labels.gaussian_labels == obj)
        pos = cloud.positions[idx]
        axis = int(np.argmax(pos.var(axis=0)))
        order = np.argsort(pos[:, axis], kind="stable")
        chunks = np.array_split(order, parts_per_object)
        for chunk in chunks:
            part_labels[idx[chunk]] = next_id
            next_id += 1
    return part_labels


def dominant_label_map(cloud: GaussianCloud, gaussian_labels: np.ndarray,
                       weights: splat.BlendWeights,
                       min_alpha: float = 0.5) -> np.ndarray:
    """Per-pixel dominant label (0 where uncovered or background-dominated)."""
    n_labels = int(gaussian_labels.max()) + 1
    wmaps = splat.render_label_weights(cloud, gaussian_labels, n_labels, weights)
    flat = wmaps.reshape(-1, n_labels)
    if n_labels == 1:
        return np.zeros(weights.shape, dtype=np.int64)
    dom = np.argmax(flat[:, 1:], axis=1) + 1
    covered = (weights.alpha.reshape(-1) >= min_alpha) & (flat[np.arange(len(dom)), dom] > 0)
    return np.where(covered, dom, 0).reshape(weights.shape)


def _adjacent_pairs(cloud: GaussianCloud, labels: GroundTruthLabels):
    """Each object paired with its nearest neighbor by centroid distance."""
    ids = labels.object_ids
    if len(ids) < 2:
        return []
    centers = np.stack([
        cloud.positions[labels.gaussian_labels == o].mean(axis=0) for o in ids
    ])
    pairs = set()
    for i, obj in enumerate(ids):
        d = np.linalg.norm(centers - centers[i], axis=1)
        d[i] = np.inf
        j = int(np.argmin(d))
        pairs.add((min(obj, ids[j]), max(obj, ids[j])))
    return sorted(pairs)


def synth_masks(cloud: GaussianCloud, cameras, labels: GroundTruthLabels,
                levels=("object", "coarse"), parts_per_object: int = 2,
                min_alpha: float = 0.5, merge_jitter: float = 0.0,
                seed: int = 0, weight_cache: dict | None = None) -> dict:
    """Render ground-truth labels into per-view multi-granularity stacks.

    "object" gives one mask per visible object (pixels where that object's
    blend weight dominates), "part" splits each object geometrically, and
    "coarse" adds unions of adjacent objects.

    `merge_jitter` emulates the granularity inconsistency of automatically
    extracted masks: with that probability, per view, an adjacent object
    pair appears as one merged mask instead of two object masks (and no
    separate coarse mask), so the same 3D point is grouped differently
    across views.
    """
    for level in levels:
        if level not in GRANULARITY_LEVELS:
            raise ValueError(f"unknown granularity level {level!r}")
    part_labels = split_parts(cloud, labels, parts_per_object) \
        if "part" in levels else None
    need_pairs = "coarse" in levels or merge_jitter > 0
    pairs = _adjacent_pairs(cloud, labels) if need_pairs else []
    rng = np.random.default_rng(seed)

    stacks = {}
    for cam in cameras:
        weights = None if weight_cache is None else weight_cache.get(cam.id)
        if weights is None:
            weights = splat.compute_blend_weights(cloud, cam)
        dom = dominant_label_map(cloud, labels.gaussian_labels, weights, min_alpha)
        object_masks = {o: dom == o for o in labels.object_ids}

        merged = set()
        union_masks = []
        for a, b in pairs:
            if merge_jitter > 0 and rng.random() < merge_jitter:
                if not (a in merged or b in merged):
                    merged.update((a, b))
                    union_masks.append(object_masks[a] | object_masks[b])
            elif "coarse" in levels:
                union_masks.append(object_masks[a] | object_masks[b])

        view_masks = []
        if "object" in levels:
            view_masks.extend(m for o, m in object_masks.items()
                              if o not in merged and m.any())
        if "part" in levels:
            dom_part = dominant_label_map(cloud, part_labels, weights, min_alpha)
            for p in np.unique(part_labels[part_labels > 0]):
                m = dom_part == p
                if m.any():
                    view_masks.append(m)
        view_masks.extend(m for m in union_masks if m.any())

        if not view_masks:
            view_masks = [np.zeros(weights.shape, dtype=bool)]
        stacks[cam.id] = MaskStack(view_id=cam.id, masks=np.stack(view_masks))
    return stacks


def synth_guidance(cloud: GaussianCloud, cameras, labels: GroundTruthLabels,
                   c_sam: int = 64, grid_divisor: int = 4, noise: float = 0.05,
                   part_strength: float = 0.35, parts_per_object: int = 2,
                   seed: int = 0, center: bool = True,
                   weight_cache: dict | None = None) -> dict:
    """Label-derived stand-in for offline guidance feature maps.

    Cells get a per-object embedding plus a weaker per-part component and
    isotropic noise, mimicking feature maps that separate objects strongly
    and parts weakly. Grids are zero-centered per view by default; a
    common-mode component would leak into every pooled query and bias all
    trained features toward one shared direction.
    """
    rng = np.random.default_rng(seed)
    n_objects = len(labels.object_ids)
    part_labels = split_parts(cloud, labels, parts_per_object)
    n_parts = int(part_labels.max())

    basis = np.linalg.qr(rng.normal(size=(c_sam, n_objects + 1)))[0].T  # rows orthonormal
    part_emb = rng.normal(size=(n_parts + 1, c_sam))
    part_emb /= np.linalg.norm(part_emb, axis=1, keepdims=True)

    out = {}
    for cam in cameras:
        weights = None if weight_cache is None else weight_cache.get(cam.id)
        if weights is None:
            weights = splat.compute_blend_weights(cloud, cam)
        dom_obj = dominant_label_map(cloud, labels.gaussian_labels, weights)
        dom_part = dominant_label_map(cloud, part_labels, weights)
        hf = max(1, cam.height // grid_divisor)
        wf = max(1, cam.width // grid_divisor)
        rows = np.minimum((np.arange(hf) + 0.5) * cam.height / hf, cam.height - 1)
        cols = np.minimum((np.arange(wf) + 0.5) * cam.width / wf, cam.width - 1)
        obj_cells = dom_obj[np.ix_(rows.astype(int), cols.astype(int))]
        part_cells = dom_part[np.ix_(rows.astype(int), cols.astype(int))]
        grid = basis[obj_cells] + part_strength * part_emb[part_cells]
        grid = grid + noise * rng.normal(size=grid.shape)
        if center:
            grid = grid - grid.reshape(-1, c_sam).mean(axis=0)
        out[cam.id] = GuidanceFeatureMap(view_id=cam.id, grid=grid,
                                         image_shape=(cam.height, cam.width))
    return out


def validate_stack(stack: MaskStack, camera: Camera,
                   rng: np.random.Generator | None = None,
                   samples: int = 64) -> None:
    """Cheap consistency checks: dimensions and sampled membership rows."""
    if stack.image_shape != (camera.height, camera.width):
        raise FormatError(
            f"stack {stack.view_id}: masks are {stack.image_shape}, "
            f"camera is {(camera.height, camera.width)}"
        )
    rng = rng or np.random.default_rng(0)
    h, w = stack.image_shape
    for _ in range(samples):
        x, y = int(rng.integers(w)), int(rng.integers(h))
        expected = tuple(np.flatnonzero(stack.pixel_table[y * w + x]))
        if stack.membership((x, y)) != expected:
            raise FormatError(
                f"stack {stack.view_id}: membership index inconsistent at ({x},{y})"
            )
