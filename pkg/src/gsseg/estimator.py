"""Estimator-style facade over distillation and promptable segmentation.

`FeatureDistiller` is the fit stage (train per-Gaussian features plus the
projector), `PromptSegmenter` the predict stage (prompt in, segmentation
out). Both follow the scikit-learn parameter conventions so they compose
with grid search and pipelines; the heavy lifting stays in the functional
modules.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from sklearn.base import BaseEstimator

from . import distill, masks as masks_mod, match, post, prompt as prompt_mod
from . import scene as scene_mod
from . import splat
from .errors import ConfigError, StateError

log = logging.getLogger(__name__)


@dataclass
class SceneBundle:
    """Everything one scene needs: cloud, cameras, masks, guidance, labels."""

    cloud: scene_mod.GaussianCloud
    cameras: list
    stacks: dict = field(default_factory=dict)
    guidance: dict | None = None
    labels: scene_mod.GroundTruthLabels | None = None

    def __post_init__(self):
        self._weight_cache = {}
        self._camera_by_id = {c.id: c for c in self.cameras}
        if len(self._camera_by_id) != len(self.cameras):
            raise ConfigError("duplicate camera ids in bundle")

    def camera(self, view_id: str) -> scene_mod.Camera:
        if view_id not in self._camera_by_id:
            raise KeyError(f"unknown view {view_id!r}")
        return self._camera_by_id[view_id]

    def blend_weights(self, view_id: str) -> splat.BlendWeights:
        """Per-view blend weights, cached (geometry is frozen)."""
        if view_id not in self._weight_cache:
            self._weight_cache[view_id] = splat.compute_blend_weights(
                self.cloud, self.camera(view_id)
            )
        return self._weight_cache[view_id]

    def warm_cache(self, view_ids=None) -> None:
        for vid in view_ids or self._camera_by_id:
            self.blend_weights(vid)

    @property
    def weight_cache(self) -> dict:
        return self._weight_cache


def save_bundle(bundle: SceneBundle, out_dir) -> None:
    """Persist a bundle in the documented directory layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene_mod.save_ply(bundle.cloud, out / "scene.ply")
    scene_mod.save_cameras(bundle.cameras, out / "cameras.json")
    if bundle.labels is not None:
        scene_mod.save_labels(bundle.labels, out / "labels.json")
    if bundle.stacks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)
        for vid, stack in bundle.stacks.items():
            masks_mod.save_stack(stack, mask_dir / f"{vid}.gsten")
    if bundle.guidance:
        gdir = out / "guidance"
        gdir.mkdir(exist_ok=True)
        for vid, gfm in bundle.guidance.items():
            masks_mod.save_guidance(gfm, gdir / f"{vid}.gsten")


def load_bundle(scene_path, cameras_path, masks_dir=None, guidance_dir=None,
                labels_path=None, feature_dim: int = 32) -> SceneBundle:
    """Load a bundle from explicit paths (see README for the layout)."""
    cloud = scene_mod.load_ply(scene_path, feature_dim=feature_dim)
    cameras = scene_mod.load_cameras(cameras_path)
    stacks = {}
    if masks_dir is not None:
        for cam in cameras:
            path = Path(masks_dir) / f"{cam.id}.gsten"
            if path.exists():
                stacks[cam.id] = masks_mod.load_stack(
                    path, view_id=cam.id, expect_shape=(cam.height, cam.width)
                )
    guidance = None
    if guidance_dir is not None and Path(guidance_dir).is_dir():
        guidance = {}
        for cam in cameras:
            path = Path(guidance_dir) / f"{cam.id}.gsten"
            if path.exists():
                guidance[cam.id] = masks_mod.load_guidance(
                    path, view_id=cam.id, image_shape=(cam.height, cam.width)
                )
        if not guidance:
            guidance = None
    labels = scene_mod.load_labels(labels_path) if labels_path else None
    return SceneBundle(cloud=cloud, cameras=cameras, stacks=stacks,
                       guidance=guidance, labels=labels)


def load_bundle_dir(scene_dir, feature_dim: int = 32) -> SceneBundle:
    d = Path(scene_dir)
    labels = d / "labels.json"
    return load_bundle(
        d / "scene.ply", d / "cameras.json",
        masks_dir=d / "masks" if (d / "masks").is_dir() else None,
        guidance_dir=d / "guidance" if (d / "guidance").is_dir() else None,
        labels_path=labels if labels.exists() else None,
        feature_dim=feature_dim,
    )


class FeatureDistiller(BaseEstimator):
    """Trains per-Gaussian features from a SceneBundle.

    Parameters mirror TrainConfig; `fit` publishes the trained features
    back into the bundle's cloud and keeps the projector and loss trace
    as attributes.
    """

    def __init__(self, iterations=20000, lam=1.0, lr_features=2.5e-3,
                 lr_projector=1e-4, pairs_per_view=4096, masks_per_step=16,
                 feature_dim=32, hidden_dim=256, seed=0, use_guidance=True):
        self.iterations = iterations
        self.lam = lam
        self.lr_features = lr_features
        self.lr_projector = lr_projector
        self.pairs_per_view = pairs_per_view
        self.masks_per_step = masks_per_step
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.seed = seed
        self.use_guidance = use_guidance

    def to_train_config(self) -> distill.TrainConfig:
        return distill.TrainConfig(
            iterations=self.iterations, lam=self.lam,
            lr_features=self.lr_features, lr_projector=self.lr_projector,
            pairs_per_view=self.pairs_per_view, masks_per_step=self.masks_per_step,
            feature_dim=self.feature_dim, hidden_dim=self.hidden_dim,
            seed=self.seed,
        )

    def fit(self, X: SceneBundle, y=None, progress=None):
        if not isinstance(X, SceneBundle):
            raise TypeError("FeatureDistiller.fit expects a SceneBundle")
        guidance = X.guidance if self.use_guidance else None
        result = distill.train(
            X.cloud, X.cameras, X.stacks, guidance,
            self.to_train_config(), weight_cache=X.weight_cache,
            progress=progress,
        )
        self.features_ = result.features
        self.projector_ = result.projector
        self.loss_trace_ = result.trace
        self.result_ = result
        return self

    def save(self, path) -> None:
        if not hasattr(self, "result_"):
            raise StateError("distiller is not fitted")
        distill.save_features(path, self.result_)


class PromptSegmenter(BaseEstimator):
    """Prompt-to-segmentation pipeline over a trained bundle.

    `fit` binds the bundle (and optional projector for guidance prompts)
    and warms per-view raster caches; `predict` runs query generation,
    matching and 3D post-processing, recording per-phase timing.
    """

    def __init__(self, kmeans_clusters=5, accept_ratio=0.9, kmeans_max_iter=50,
                 kmeans_tol=1e-6, seed=0, postprocess=True):
        self.kmeans_clusters = kmeans_clusters
        self.accept_ratio = accept_ratio
        self.kmeans_max_iter = kmeans_max_iter
        self.kmeans_tol = kmeans_tol
        self.seed = seed
        self.postprocess = postprocess

    def _prompt_config(self, overrides=None) -> prompt_mod.PromptConfig:
        cfg = prompt_mod.PromptConfig(
            kmeans_clusters=self.kmeans_clusters, accept_ratio=self.accept_ratio,
            kmeans_max_iter=self.kmeans_max_iter, kmeans_tol=self.kmeans_tol,
            seed=self.seed,
        )
        return cfg.replace(overrides) if overrides else cfg

    def fit(self, X: SceneBundle, y=None, projector=None, warm=True):
        if not isinstance(X, SceneBundle):
            raise TypeError("PromptSegmenter.fit expects a SceneBundle")
        self.bundle_ = X
        self.projector_ = projector
        if warm:
            X.warm_cache()
        return self

    def _check_fitted(self):
        if not hasattr(self, "bundle_"):
            raise StateError("segmenter is not fitted to a bundle")

    def queries_for(self, prompt: prompt_mod.Prompt) -> prompt_mod.QuerySet:
        """Build the query set for a prompt (the retrieval front half)."""
        self._check_fitted()
        bundle = self.bundle_
        camera = bundle.camera(prompt.view)
        weights = bundle.blend_weights(prompt.view)
        fmap = splat.render_features(bundle.cloud, camera, weights=weights)
        cfg = self._prompt_config(prompt.config_overrides)

        if prompt.kind == "points":
            return prompt_mod.point_queries(fmap, prompt)
        if prompt.kind in ("scribble", "mask"):
            return prompt_mod.kmeans_queries(fmap, prompt, cfg)
        if self.projector_ is None:
            raise StateError("guidance prompts need a trained projector")
        if not bundle.guidance or prompt.view not in bundle.guidance:
            raise StateError(f"no guidance features for view {prompt.view!r}")
        fprime = distill.project_guidance(bundle.guidance[prompt.view],
                                          self.projector_)
        return prompt_mod.sam_based_queries(fprime, fmap, prompt.mask_pos, cfg)

    def predict(self, prompt: prompt_mod.Prompt) -> match.Segmentation:
        """Full pipeline: queries -> scoring -> selection -> post-processing.

        Stage counts and timing land in `last_info_`.
        """
        self._check_fitted()
        bundle = self.bundle_
        camera = bundle.camera(prompt.view)

        t0 = time.perf_counter()
        queries = self.queries_for(prompt)
        sp, sn = match.score(bundle.cloud.features, queries)
        seg = match.select(sp, sn, queries.metric, prompt_id=prompt.id)
        t1 = time.perf_counter()

        info = {
            "counts": {"raw": seg.count},
            "timing_ms": {"retrieving_ms": (t1 - t0) * 1e3,
                          "filtering_ms": 0.0, "growing_ms": 0.0},
            "metric": queries.metric,
            "provenance": queries.provenance,
        }
        if self.postprocess:
            mask = prompt.mask_pos if prompt.kind in ("mask", "sam_based") else None
            seg, post_info = post.postprocess(
                bundle.cloud, seg, prompt.kind, mask=mask, camera=camera,
                weights=bundle.blend_weights(prompt.view),
            )
            info["counts"].update(post_info["counts"])
            info["timing_ms"].update(post_info["timing_ms"])
        self.last_info_ = info
        return seg
