"""Metrics and benchmark harnesses: 2D propagation, 3D label IoU, timing."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import masks as masks_mod
from . import splat
from .estimator import PromptSegmenter, SceneBundle
from .match import Segmentation
from .prompt import Prompt
from .scene import GaussianCloud, GroundTruthLabels

log = logging.getLogger(__name__)

MEMBERSHIP_ALPHA_THRESHOLD = 0.5


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks (1.0 if both empty)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def pixel_acc(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.mean(pred == gt))


def render_membership_mask(cloud: GaussianCloud, seg: Segmentation, camera) -> np.ndarray:
    """Render only the member Gaussians; mask = accumulated alpha >= 0.5."""
    if not seg.membership.any():
        return np.zeros((camera.height, camera.width), dtype=bool)
    subset = cloud.subset(seg.membership)
    weights = splat.compute_blend_weights(subset, camera)
    return weights.alpha >= MEMBERSHIP_ALPHA_THRESHOLD


def gaussian_label_iou(seg: Segmentation, labels: GroundTruthLabels,
                       target: int) -> float:
    """IoU between the membership set and a label's Gaussian set."""
    if target not in labels.object_ids:
        raise ValueError(f"unknown label {target}")
    gt = labels.mask_for(target)
    union = np.count_nonzero(seg.membership | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(seg.membership & gt) / union


@dataclass
class TimingBreakdown:
    """Per-phase latency split mirroring the three inference phases."""

    retrieving_ms: float = 0.0
    filtering_ms: float = 0.0
    growing_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.retrieving_ms + self.filtering_ms + self.growing_ms

    @staticmethod
    def from_info(info: dict) -> "TimingBreakdown":
        t = info.get("timing_ms", {})
        return TimingBreakdown(
            retrieving_ms=float(t.get("retrieving_ms", 0.0)),
            filtering_ms=float(t.get("filtering_ms", 0.0)),
            growing_ms=float(t.get("growing_ms", 0.0)),
        )


def time_breakdown(run_infos: list) -> dict:
    """Aggregate per-request timing into mean/std per phase."""
    if not run_infos:
        return {}
    rows = [TimingBreakdown.from_info(i) for i in run_infos]
    out = {}
    for phase in ("retrieving_ms", "filtering_ms", "growing_ms"):
        vals = np.array([getattr(r, phase) for r in rows])
        out[phase] = {"mean": float(vals.mean()), "std": float(vals.std()),
                      "max": float(vals.max())}
    totals = np.array([r.total_ms for r in rows])
    out["total_ms"] = {"mean": float(totals.mean()), "std": float(totals.std()),
                       "max": float(totals.max())}
    return out


@dataclass
class EvalReport:
    protocol: str
    per_view: list = field(default_factory=list)   # {view, iou, acc}
    per_object: list = field(default_factory=list)  # {label, iou}
    miou: float = 0.0
    macc: float = 0.0
    timing: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        if self.per_view:
            writer.writerow(["view", "iou", "acc"])
            for row in self.per_view:
                writer.writerow([row["view"], f"{row['iou']:.6f}", f"{row['acc']:.6f}"])
        if self.per_object:
            writer.writerow(["label", "iou"])
            for row in self.per_object:
                writer.writerow([row["label"], f"{row['iou']:.6f}"])
        writer.writerow(["mIoU", f"{self.miou:.6f}"])
        writer.writerow(["mAcc", f"{self.macc:.6f}"])
        return buf.getvalue()


def _gt_object_mask(bundle: SceneBundle, view_id: str, label: int) -> np.ndarray:
    dom = masks_mod.dominant_label_map(
        bundle.cloud, bundle.labels.gaussian_labels, bundle.blend_weights(view_id)
    )
    return dom == label


def best_prompt_pixel(bundle: SceneBundle, view_id: str, label: int):
    """Pixel (x, y) where the object's blend weight peaks in the view."""
    weights = bundle.blend_weights(view_id)
    n_labels = int(bundle.labels.gaussian_labels.max()) + 1
    wmap = splat.render_label_weights(
        bundle.cloud, bundle.labels.gaussian_labels, n_labels, weights
    )[..., label]
    y, x = np.unravel_index(np.argmax(wmap), wmap.shape)
    return int(x), int(y)


def labels3d_protocol(bundle: SceneBundle, segmenter: PromptSegmenter,
                      view_id: str | None = None,
                      negative_clicks: bool = True) -> EvalReport:
    """Point-prompt each object, measure 3D label IoU against ground truth.

    The simulated annotator clicks the target where it renders strongest
    and, by default, places one negative click on each other object (the
    usual positive/negative interactive workflow).
    """
    if bundle.labels is None:
        raise ValueError("labels3d protocol requires ground-truth labels")
    view_id = view_id or bundle.cameras[0].id
    clicks = {int(label): best_prompt_pixel(bundle, view_id, int(label))
              for label in bundle.labels.object_ids}
    per_object = []
    infos = []
    for label in bundle.labels.object_ids:
        label = int(label)
        negatives = [px for other, px in clicks.items() if other != label] \
            if negative_clicks else []
        p = Prompt(view=view_id, kind="points", points_pos=[clicks[label]],
                   points_neg=negatives, id=f"labels3d-{label}")
        seg = segmenter.predict(p)
        infos.append(segmenter.last_info_)
        per_object.append({
            "label": label,
            "iou": gaussian_label_iou(seg, bundle.labels, label),
        })
    miou = float(np.mean([r["iou"] for r in per_object])) if per_object else 0.0
    return EvalReport(protocol="labels3d", per_object=per_object, miou=miou,
                      macc=miou, timing=time_breakdown(infos),
                      metadata={"view": view_id, "n_gaussians": bundle.cloud.count})


def propagate_protocol(bundle: SceneBundle, segmenter: PromptSegmenter,
                       label: int, reference_view: str | None = None,
                       eval_views: list | None = None) -> EvalReport:
    """Mask-prompt one view, render the 3D result into held-out views and
    compare against the ground-truth label masks there."""
    if bundle.labels is None:
        raise ValueError("propagate protocol requires ground-truth labels")
    reference_view = reference_view or bundle.cameras[0].id
    if eval_views is None:
        eval_views = [c.id for c in bundle.cameras if c.id != reference_view]

    ref_mask = _gt_object_mask(bundle, reference_view, label)
    if not ref_mask.any():
        raise ValueError(f"label {label} is not visible in view {reference_view!r}")
    p = Prompt(view=reference_view, kind="mask", mask_pos=ref_mask,
               id=f"propagate-{label}")
    seg = segmenter.predict(p)
    info = segmenter.last_info_

    per_view = []
    for vid in eval_views:
        gt = _gt_object_mask(bundle, vid, label)
        pred = render_membership_mask(bundle.cloud, seg, bundle.camera(vid))
        per_view.append({"view": vid, "iou": mask_iou(pred, gt),
                         "acc": pixel_acc(pred, gt)})
    miou = float(np.mean([r["iou"] for r in per_view])) if per_view else 0.0
    macc = float(np.mean([r["acc"] for r in per_view])) if per_view else 0.0
    return EvalReport(
        protocol="propagate", per_view=per_view, miou=miou, macc=macc,
        timing=time_breakdown([info]),
        metadata={"label": int(label), "reference_view": reference_view,
                  "n_gaussians": bundle.cloud.count},
    )
