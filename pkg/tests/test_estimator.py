import numpy as np
import pytest
from sklearn.base import clone

from gsseg import distill, masks as M
from gsseg.errors import StateError
from gsseg.estimator import (FeatureDistiller, PromptSegmenter, SceneBundle,
                             load_bundle_dir, save_bundle)
from gsseg.prompt import Prompt
from gsseg.scene import SynthSpec, synth_scene


@pytest.fixture(scope="module")
def mini_bundle():
    spec = SynthSpec(n_objects=2, gaussians_per_object=60, separation=5.0,
                     n_views=3, image_size=32, feature_dim=8, seed=17)
    cloud, cams, labels = synth_scene(spec)
    bundle = SceneBundle(cloud=cloud, cameras=cams, labels=labels)
    bundle.warm_cache()
    bundle.stacks = M.synth_masks(cloud, cams, labels, levels=("object",),
                                  weight_cache=bundle.weight_cache)
    bundle.guidance = M.synth_guidance(cloud, cams, labels, c_sam=8,
                                       weight_cache=bundle.weight_cache)
    return bundle


def test_get_set_params_roundtrip():
    d = FeatureDistiller(iterations=123, lam=0.5)
    params = d.get_params()
    assert params["iterations"] == 123
    assert params["lam"] == 0.5
    d2 = clone(d).set_params(iterations=7)
    assert d2.iterations == 7
    assert d2.lam == 0.5


def test_distiller_fit_exposes_artifacts(mini_bundle):
    d = FeatureDistiller(iterations=20, pairs_per_view=64, masks_per_step=2,
                         feature_dim=8, seed=0)
    d.fit(mini_bundle)
    assert d.features_.shape == (mini_bundle.cloud.count, 8)
    assert d.projector_ is not None
    assert d.loss_trace_.shape == (20, 3)


def test_distiller_rejects_non_bundle():
    with pytest.raises(TypeError):
        FeatureDistiller().fit(np.zeros((3, 3)))


def test_segmenter_requires_fit(mini_bundle):
    seg = PromptSegmenter()
    with pytest.raises(StateError):
        seg.predict(Prompt(view="view00", kind="points", points_pos=[(1, 1)]))


def covered_pixel(bundle, view):
    alpha = bundle.blend_weights(view).alpha
    y, x = np.unravel_index(np.argmax(alpha), alpha.shape)
    return int(x), int(y)


def test_segmenter_predict_deterministic(mini_bundle):
    d = FeatureDistiller(iterations=40, pairs_per_view=64, masks_per_step=2,
                         feature_dim=8, seed=0).fit(mini_bundle)
    segm = PromptSegmenter().fit(mini_bundle, projector=d.projector_, warm=False)
    p = Prompt(view="view00", kind="points", points_pos=[covered_pixel(mini_bundle, "view00")], id="x")
    a = segm.predict(p)
    b = segm.predict(p)
    assert np.array_equal(a.membership, b.membership)
    assert a.stage == "grown"
    info = segm.last_info_
    assert info["counts"]["raw"] >= 0
    assert set(info["timing_ms"]) == {"retrieving_ms", "filtering_ms", "growing_ms"}


def test_segmenter_no_postprocess_stage(mini_bundle):
    d = FeatureDistiller(iterations=10, pairs_per_view=64, masks_per_step=2,
                         feature_dim=8, seed=0).fit(mini_bundle)
    segm = PromptSegmenter(postprocess=False).fit(mini_bundle,
                                                  projector=d.projector_,
                                                  warm=False)
    p = Prompt(view="view00", kind="points",
               points_pos=[covered_pixel(mini_bundle, "view00")], id="x")
    assert segm.predict(p).stage == "raw"


def test_sam_prompt_requires_projector(mini_bundle):
    segm = PromptSegmenter().fit(mini_bundle, projector=None, warm=False)
    mask = np.zeros((32, 32), dtype=bool)
    mask[8:20, 8:20] = True
    p = Prompt(view="view00", kind="sam_based", mask_pos=mask, id="s")
    with pytest.raises(StateError, match="projector"):
        segm.predict(p)


def test_bundle_roundtrip_via_directory(tmp_path, mini_bundle):
    save_bundle(mini_bundle, tmp_path / "scene")
    back = load_bundle_dir(tmp_path / "scene", feature_dim=8)
    assert back.cloud.count == mini_bundle.cloud.count
    assert len(back.cameras) == 3
    assert set(back.stacks) == {c.id for c in back.cameras}
    assert back.guidance is not None
    assert np.array_equal(back.labels.gaussian_labels,
                          mini_bundle.labels.gaussian_labels)
    assert np.abs(back.cloud.positions - mini_bundle.cloud.positions).max() < 1e-6


def test_unknown_view_raises(mini_bundle):
    with pytest.raises(KeyError):
        mini_bundle.camera("nope")
