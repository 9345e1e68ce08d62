"""Promptable 3D segmentation over Gaussian-splat point clouds."""

from .scene import (
    Camera,
    GaussianCloud,
    GroundTruthLabels,
    SynthSpec,
    load_cameras,
    load_labels,
    load_ply,
    save_cameras,
    save_labels,
    save_ply,
    save_segmentation,
    synth_scene,
)
from .splat import (
    FeatureMap,
    backward_features,
    compute_blend_weights,
    project,
    render_color,
    render_features,
)
from .masks import (
    GuidanceFeatureMap,
    MaskStack,
    corr,
    sample_pairs,
    synth_guidance,
    synth_masks,
)
from .distill import Projector, TrainConfig, load_features, save_features, train
from .prompt import (
    Prompt,
    PromptConfig,
    QuerySet,
    kmeans_queries,
    parse_prompt,
    point_queries,
    sam_based_queries,
)
from .match import Segmentation, score, select_cosine, select_dot
from .post import (
    SpatialIndex,
    ball_grow,
    postprocess,
    project_mask_to_gaussians,
    region_grow_filter,
    statistical_filter,
)
from .evaluation import (
    EvalReport,
    gaussian_label_iou,
    mask_iou,
    pixel_acc,
    render_membership_mask,
)
from .estimator import (
    FeatureDistiller,
    PromptSegmenter,
    SceneBundle,
    load_bundle,
    load_bundle_dir,
    save_bundle,
)

__version__ = "0.1.0"
