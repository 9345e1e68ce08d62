"""3D-prior post-processing: statistical filter, region growing, ball query.

All neighborhood queries run through SpatialIndex, which resolves
distance ties by lower point index so results are reproducible and match
a brute-force oracle exactly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .match import Segmentation
from .scene import Camera, GaussianCloud
from .splat import ALPHA_SKIP, BlendWeights, compute_blend_weights, project
from .errors import StateError

log = logging.getLogger(__name__)


class SpatialIndex:
    """kd-tree over a point subset with deterministic tie-breaking."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("points must be (K, 3)")
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def knn(self, queries: np.ndarray, k: int, exclude_self: bool = False):
        """k nearest points for each query; ties broken by lower index.

        Returns (distances, indices), both (len(queries), k). With
        `exclude_self` the query row index i is never its own neighbor
        (for self-queries over the indexed points).
        """
        queries = np.asarray(queries, dtype=np.float64)
        n = len(self.points)
        want = k + (1 if exclude_self else 0)
        if want > n:
            raise ValueError(f"asked for {want} neighbors from {n} points")

        # over-fetch so boundary ties can be resolved by index, then
        # re-rank with exactly the oracle's arithmetic
        slack = min(n, want + 8)
        while True:
            d, idx = self.tree.query(queries, k=np.arange(1, slack + 1), workers=-1)
            if slack == n or not np.any(d[:, want - 1] == d[:, -1]):
                break
            slack = min(n, slack * 2)

        diffs = queries[:, None, :] - self.points[idx]
        exact = np.sqrt((diffs ** 2).sum(axis=-1))
        if exclude_self:
            own = idx == np.arange(len(queries))[:, None]
            exact = np.where(own, np.inf, exact)
        order = np.lexsort((idx, exact), axis=1)[:, :k]
        rows = np.arange(len(queries))[:, None]
        return exact[rows, order], idx[rows, order]

    def nn_distances(self) -> np.ndarray:
        """Distance of each indexed point to its nearest other point.

        Distances are insensitive to how index ties resolve, so this runs
        the raw sorted query instead of the exact-tie path.
        """
        d, _ = self.tree.query(self.points, k=2, workers=-1)
        return d[:, 1]

    def mean_knn_distances(self, k: int) -> np.ndarray:
        """Mean distance of each indexed point to its k nearest others."""
        d, _ = self.tree.query(self.points, k=k + 1, workers=-1)
        return np.atleast_2d(d)[:, 1:].mean(axis=1)

    def within(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Bool per query: is any indexed point within `radius` (<=)."""
        queries = np.asarray(queries, dtype=np.float64)
        d, _ = self.tree.query(queries, k=1, workers=-1)
        return np.atleast_1d(d) <= radius

    def ball_neighbors(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Unique indices of indexed points within `radius` of any query."""
        hits = self.tree.query_ball_point(np.asarray(queries), radius, workers=-1)
        if len(hits) == 0:
            return np.zeros(0, dtype=np.int64)
        flat = np.concatenate([np.asarray(h, dtype=np.int64) for h in hits]) \
            if any(len(h) for h in hits) else np.zeros(0, dtype=np.int64)
        return np.unique(flat)


def _statistical_pass(cloud: GaussianCloud, seg: Segmentation):
    members = np.flatnonzero(seg.membership)
    if len(members) < 2:
        log.warning("statistical filter skipped: %d member(s)", len(members))
        return seg.replaced(seg.membership.copy(), "filtered"), None

    index = SpatialIndex(cloud.positions[members])
    k = max(1, round(np.sqrt(len(members))))
    k = min(k, len(members) - 1)
    mean_d = index.mean_knn_distances(k)
    mu = float(np.mean(mean_d))
    sigma = float(np.std(mean_d))
    keep = mean_d <= mu + sigma

    membership = np.zeros_like(seg.membership)
    membership[members[keep]] = True
    return seg.replaced(membership, "filtered"), mean_d[keep]


def statistical_filter(cloud: GaussianCloud, seg: Segmentation) -> Segmentation:
    """Drop members whose mean distance to their sqrt(|G^t|) nearest
    members exceeds mean + one standard deviation of those averages."""
    out, _ = _statistical_pass(cloud, seg)
    return out


def statistical_filter_adaptive(cloud: GaussianCloud, seg: Segmentation,
                                max_passes: int = 3,
                                dispersion_stop: float = 2.0) -> Segmentation:
    """Repeat the mean+std pass while the kept distances stay bimodal.

    A single pass under-removes when stray distances are heavy tailed
    (extreme outliers inflate the std and shield moderate strays). A kept
    max/median ratio well above 1 signals such leftovers; homogeneous
    survivors stop the loop so the target bulk is not eroded.
    """
    out, kept = _statistical_pass(cloud, seg)
    for _ in range(max_passes - 1):
        if kept is None or len(kept) == 0 or out.count == seg.count:
            break
        med = float(np.median(kept))
        if med <= 0 or float(np.max(kept)) / med <= dispersion_stop:
            break
        seg = out
        out, kept = _statistical_pass(cloud, seg)
    return out


@dataclass
class MaskProjection:
    """Gaussians validated (seed) or contradicted (excluded) by a 2D mask."""

    validated: np.ndarray
    excluded: np.ndarray


def project_mask_to_gaussians(cloud: GaussianCloud, camera: Camera,
                              mask: np.ndarray, seg: Segmentation,
                              weights: BlendWeights | None = None) -> MaskProjection:
    """Project a prompt mask onto the cloud.

    A member is validated when its projected mean lands inside the mask
    and its own blend weight at that pixel is at least the skip threshold
    (occluded splats carry no 2D evidence). Visible Gaussians landing in
    the mask complement are flagged excluded.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (camera.height, camera.width):
        raise ValueError(f"mask is {mask.shape}, camera expects "
                         f"{(camera.height, camera.width)}")
    if weights is None:
        weights = compute_blend_weights(cloud, camera)

    proj = project(cloud, camera)
    px = np.floor(proj.means2d[:, 0]).astype(np.int64)
    py = np.floor(proj.means2d[:, 1]).astype(np.int64)
    inside = (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)

    gauss = proj.indices[inside]
    lin = py[inside] * camera.width + px[inside]
    visible = weights.weight_at(lin, gauss) >= ALPHA_SKIP
    in_mask = mask.reshape(-1)[lin]

    validated = np.zeros(cloud.count, dtype=bool)
    excluded = np.zeros(cloud.count, dtype=bool)
    validated[gauss[visible & in_mask]] = True
    excluded[gauss[visible & ~in_mask]] = True
    validated &= seg.membership

    if not validated.any():
        raise StateError("mask validates no segmented Gaussians "
                         "(prompt/scene mismatch)")
    return MaskProjection(validated=validated, excluded=excluded)


def region_grow_filter(cloud: GaussianCloud, seg: Segmentation,
                       seeds: np.ndarray) -> Segmentation:
    """Keep the members reachable from the seeds by region growing.

    The growth threshold is the largest nearest-neighbor distance inside
    the seed set (mean member spacing when only one seed exists); steps
    use <= so chains spaced exactly at the threshold stay connected.
    """
    seeds = np.asarray(seeds, dtype=bool)
    if not seeds.any():
        raise ValueError("seed set is empty")
    if np.any(seeds & ~seg.membership):
        raise ValueError("seeds must be a subset of the membership")

    members = np.flatnonzero(seg.membership)
    local_seed = seeds[members]
    positions = cloud.positions[members]
    index = SpatialIndex(positions)

    n_seeds = int(local_seed.sum())
    if n_seeds >= 2:
        seed_index = SpatialIndex(positions[local_seed])
        threshold = float(np.max(seed_index.nn_distances()))
    elif len(members) >= 2:
        threshold = float(np.mean(index.nn_distances()))
    else:
        threshold = 0.0

    visited = local_seed.copy()
    front = np.flatnonzero(local_seed)
    while len(front) > 0:
        hits = index.ball_neighbors(positions[front], threshold)
        fresh = hits[~visited[hits]]
        visited[fresh] = True
        front = fresh

    membership = np.zeros_like(seg.membership)
    membership[members[visited]] = True
    return seg.replaced(membership, "filtered")


def ball_grow(cloud: GaussianCloud, seg: Segmentation,
              universe: np.ndarray | None = None) -> Segmentation:
    """Absorb outside Gaussians within one ball radius of the filtered set.

    The radius is the maximum nearest-neighbor distance inside the set; a
    single pass, no iteration. `universe` restricts which Gaussians may
    be absorbed (used to honor mask-based exclusions).
    """
    members = np.flatnonzero(seg.membership)
    if len(members) < 2:
        log.warning("ball growing skipped: %d member(s)", len(members))
        return seg.replaced(seg.membership.copy(), "grown")

    index = SpatialIndex(cloud.positions[members])
    radius = float(np.max(index.nn_distances()))

    candidates = ~seg.membership
    if universe is not None:
        candidates &= np.asarray(universe, dtype=bool)
    cand_idx = np.flatnonzero(candidates)
    membership = seg.membership.copy()
    if len(cand_idx) > 0:
        absorbed = index.within(cloud.positions[cand_idx], radius)
        membership[cand_idx[absorbed]] = True
    return seg.replaced(membership, "grown")


def postprocess(cloud: GaussianCloud, seg: Segmentation, prompt_kind: str,
                mask: np.ndarray | None = None, camera: Camera | None = None,
                weights: BlendWeights | None = None):
    """Run the stage pipeline for a prompt kind.

    Point/scribble prompts: statistical filter then ball growing. Mask
    and guidance prompts: mask projection seeds region growing, then ball
    growing restricted to not re-absorb excluded Gaussians.

    Returns (grown segmentation, info) where info carries per-stage counts
    and wall-clock times in milliseconds.
    """
    if not seg.membership.any():
        raise StateError("raw segmentation is empty")

    uses_mask = prompt_kind in ("mask", "sam_based")
    if uses_mask and (mask is None or camera is None):
        raise ValueError(f"{prompt_kind} prompts require mask and camera")

    counts = {"raw": seg.count}
    t0 = time.perf_counter()
    if uses_mask:
        projection = project_mask_to_gaussians(cloud, camera, mask, seg, weights)
        filtered = region_grow_filter(cloud, seg, projection.validated)
        universe = ~projection.excluded
    else:
        filtered = statistical_filter_adaptive(cloud, seg)
        universe = None
    t1 = time.perf_counter()
    grown = ball_grow(cloud, filtered, universe=universe)
    t2 = time.perf_counter()

    counts["filtered"] = filtered.count
    counts["grown"] = grown.count
    timing = {"filtering_ms": (t1 - t0) * 1e3, "growing_ms": (t2 - t1) * 1e3}
    return grown, {"counts": counts, "timing_ms": timing}
