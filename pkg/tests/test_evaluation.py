import numpy as np
import pytest

from gsseg import evaluation as E
from gsseg import masks as M
from gsseg import splat
from gsseg.match import Segmentation
from gsseg.scene import SynthSpec, synth_scene


def test_mask_iou_identical(rng):
    m = rng.random((6, 6)) < 0.5
    assert E.mask_iou(m, m) == 1.0
    assert E.pixel_acc(m, m) == 1.0


def test_mask_iou_disjoint_halves():
    a = np.zeros((4, 8), dtype=bool)
    b = np.zeros((4, 8), dtype=bool)
    a[:, :4] = True
    b[:, 4:] = True
    assert E.mask_iou(a, b) == 0.0
    assert E.pixel_acc(a, b) == 0.0


def test_mask_iou_both_empty():
    z = np.zeros((3, 3), dtype=bool)
    assert E.mask_iou(z, z) == 1.0


def test_mask_iou_matches_set_oracle(rng):
    a = rng.random((32, 32)) < 0.4
    b = rng.random((32, 32)) < 0.4
    sa = {(y, x) for y, x in zip(*np.nonzero(a))}
    sb = {(y, x) for y, x in zip(*np.nonzero(b))}
    assert E.mask_iou(a, b) == len(sa & sb) / len(sa | sb)
    assert E.pixel_acc(a, b) == pytest.approx(
        1 - len(sa ^ sb) / 1024
    )


def test_mask_iou_shape_mismatch():
    with pytest.raises(ValueError):
        E.mask_iou(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))


def test_mask_iou_symmetric(rng):
    a = rng.random((8, 8)) < 0.5
    b = rng.random((8, 8)) < 0.5
    assert E.mask_iou(a, b) == E.mask_iou(b, a)
    assert E.pixel_acc(a, ~a) == 0.0


# -- membership rendering -------------------------------------------------------

def test_render_membership_empty(small_scene):
    cloud, cams, _ = small_scene
    seg = Segmentation(membership=np.zeros(cloud.count, dtype=bool),
                       scores=np.zeros(cloud.count))
    mask = E.render_membership_mask(cloud, seg, cams[0])
    assert not mask.any()


def test_render_membership_full_equals_alpha_threshold(small_scene):
    cloud, cams, _ = small_scene
    seg = Segmentation(membership=np.ones(cloud.count, dtype=bool),
                       scores=np.zeros(cloud.count))
    mask = E.render_membership_mask(cloud, seg, cams[0])
    weights = splat.compute_blend_weights(cloud, cams[0])
    assert np.array_equal(mask, weights.alpha >= 0.5)


def test_membership_mask_matches_gt_for_true_label(small_scene):
    cloud, cams, labels = small_scene
    cam = cams[0]
    seg = Segmentation(membership=labels.gaussian_labels == 1,
                       scores=np.zeros(cloud.count))
    pred = E.render_membership_mask(cloud, seg, cam)
    weights = splat.compute_blend_weights(cloud, cam)
    gt = M.dominant_label_map(cloud, labels.gaussian_labels, weights) == 1
    assert E.mask_iou(pred, gt) >= 0.95


# -- gaussian label IoU -----------------------------------------------------------

def test_label_iou_exact(small_scene):
    cloud, _, labels = small_scene
    seg = Segmentation(membership=labels.gaussian_labels == 2,
                       scores=np.zeros(cloud.count))
    assert E.gaussian_label_iou(seg, labels, 2) == 1.0


def test_label_iou_empty(small_scene):
    cloud, _, labels = small_scene
    seg = Segmentation(membership=np.zeros(cloud.count, dtype=bool),
                       scores=np.zeros(cloud.count))
    assert E.gaussian_label_iou(seg, labels, 1) == 0.0


def test_label_iou_third():
    from gsseg.scene import GroundTruthLabels

    labels = GroundTruthLabels(np.array([1] * 30 + [0] * 10))
    member = np.zeros(40, dtype=bool)
    member[:10] = True       # |inter| = 10
    member[30:40] = True     # union = 30 + 10 = 40... construct |union|=3k
    # choose: gt = 30 ones; membership = 10 of them + 10 outside
    seg = Segmentation(membership=member, scores=np.zeros(40))
    assert E.gaussian_label_iou(seg, labels, 1) == pytest.approx(10 / 40)


def test_label_iou_unknown_label(small_scene):
    cloud, _, labels = small_scene
    seg = Segmentation(membership=np.zeros(cloud.count, dtype=bool),
                       scores=np.zeros(cloud.count))
    with pytest.raises(ValueError):
        E.gaussian_label_iou(seg, labels, 9)


# -- timing -----------------------------------------------------------------------

def test_time_breakdown_aggregates():
    infos = [
        {"timing_ms": {"retrieving_ms": 10.0, "filtering_ms": 5.0, "growing_ms": 1.0}},
        {"timing_ms": {"retrieving_ms": 20.0, "filtering_ms": 7.0, "growing_ms": 3.0}},
    ]
    agg = E.time_breakdown(infos)
    assert agg["retrieving_ms"]["mean"] == 15.0
    assert agg["growing_ms"]["max"] == 3.0
    assert agg["total_ms"]["mean"] == 23.0


def test_timing_phases_nonnegative_and_sum():
    t = E.TimingBreakdown(retrieving_ms=2.0, filtering_ms=3.0, growing_ms=4.0)
    assert t.total_ms == 9.0
    empty = E.TimingBreakdown.from_info({})
    assert empty.total_ms == 0.0


# -- report -----------------------------------------------------------------------

def test_report_json_and_csv(tmp_path):
    report = E.EvalReport(
        protocol="labels3d",
        per_object=[{"label": 1, "iou": 0.9}, {"label": 2, "iou": 1.0}],
        miou=0.95, macc=0.95,
    )
    path = tmp_path / "r.json"
    report.save_json(path)
    import json

    loaded = json.loads(path.read_text())
    assert loaded["miou"] == 0.95
    csv_text = report.to_csv()
    assert "mIoU" in csv_text and "0.95" in csv_text


# -- protocols (oracle features end to end) -----------------------------------

@pytest.fixture(scope="module")
def oracle_bundle():
    from gsseg.estimator import SceneBundle

    spec = SynthSpec(n_objects=2, gaussians_per_object=250, separation=6.0,
                     n_views=4, image_size=48, feature_dim=8, seed=37)
    cloud, cams, labels = synth_scene(spec)
    feats = np.full((cloud.count, 8), 0.01)
    for obj in (1, 2):
        feats[labels.gaussian_labels == obj, obj] = 1.0
    cloud.publish_features(feats)
    bundle = SceneBundle(cloud=cloud, cameras=cams, labels=labels)
    bundle.warm_cache()
    return bundle


def test_labels3d_protocol_runs_unattended(oracle_bundle):
    from gsseg.estimator import PromptSegmenter

    segmenter = PromptSegmenter().fit(oracle_bundle, warm=False)
    report = E.labels3d_protocol(oracle_bundle, segmenter)
    assert report.protocol == "labels3d"
    assert len(report.per_object) == 2
    assert report.miou >= 0.9
    assert set(report.timing) >= {"retrieving_ms", "filtering_ms", "growing_ms"}


def test_propagate_protocol_runs_unattended(oracle_bundle):
    from gsseg.estimator import PromptSegmenter

    segmenter = PromptSegmenter().fit(oracle_bundle, warm=False)
    report = E.propagate_protocol(oracle_bundle, segmenter, label=1,
                                  reference_view="view00")
    assert report.protocol == "propagate"
    assert {row["view"] for row in report.per_view} == {"view01", "view02", "view03"}
    assert report.miou >= 0.9
    assert 0.0 <= report.macc <= 1.0
