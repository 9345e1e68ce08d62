import base64
import json

import numpy as np
import pytest

from gsseg import prompt as P
from gsseg import tensorio
from gsseg.splat import FeatureMap


def fmap_from(features):
    features = np.asarray(features, dtype=float)
    return FeatureMap(features=features, alpha=np.ones(features.shape[:2]))


def test_parse_points_prompt():
    p = P.parse_prompt({"view": "v0", "kind": "points",
                        "positives": [[1, 2], [3, 4]], "negatives": [[5, 6]]})
    assert p.points_pos == [(1, 2), (3, 4)]
    assert p.points_neg == [(5, 6)]


def test_parse_requires_positive():
    with pytest.raises(ValueError, match="positive"):
        P.parse_prompt({"view": "v0", "kind": "points", "positives": []})


def test_parse_unknown_kind():
    with pytest.raises(ValueError, match="kind"):
        P.parse_prompt({"view": "v0", "kind": "blob", "positives": [[0, 0]]})


def test_parse_mask_prompt_from_b64(rng):
    mask = rng.random((6, 6)) < 0.5
    mask[0, 0] = True
    blob = tensorio.encode_tensor(mask.astype(np.uint8))
    payload = {"view": "v1", "kind": "mask",
               "positives": {"data_b64": base64.b64encode(blob).decode()}}
    p = P.parse_prompt(payload)
    assert np.array_equal(p.mask_pos, mask)


def test_parse_mask_prompt_from_path(tmp_path, rng):
    mask = rng.random((5, 4)) < 0.5
    mask[2, 2] = True
    tensorio.write_tensor(tmp_path / "m.gsten", mask.astype(np.uint8))
    payload = {"view": "v1", "kind": "mask", "positives": {"path": "m.gsten"}}
    p = P.parse_prompt(payload, base_dir=tmp_path)
    assert np.array_equal(p.mask_pos, mask)


def test_load_prompt_uses_stem_as_id(tmp_path):
    path = tmp_path / "my-prompt.json"
    path.write_text(json.dumps({"view": "v", "kind": "points", "positives": [[0, 0]]}))
    assert P.load_prompt(path).id == "my-prompt"


# -- point queries -------------------------------------------------------------

def test_point_queries_single_click(rng):
    feats = rng.normal(size=(5, 5, 3))
    qs = P.point_queries(fmap_from(feats), P.Prompt(view="v", kind="points",
                                                    points_pos=[(2, 3)]))
    assert qs.metric == "cosine"
    assert np.array_equal(qs.positives[0], feats[3, 2])
    assert qs.negatives is None


def test_point_queries_counts(rng):
    feats = rng.normal(size=(5, 5, 3))
    qs = P.point_queries(fmap_from(feats), P.Prompt(
        view="v", kind="points", points_pos=[(0, 0), (1, 1)], points_neg=[(2, 2)]))
    assert qs.positives.shape == (2, 3)
    assert qs.negatives.shape == (1, 3)
    assert np.array_equal(qs.positives[1], feats[1, 1])
    assert np.array_equal(qs.negatives[0], feats[2, 2])


def test_point_queries_out_of_bounds(rng):
    feats = rng.normal(size=(4, 4, 2))
    with pytest.raises(ValueError, match="outside"):
        P.point_queries(fmap_from(feats), P.Prompt(view="v", kind="points",
                                                   points_pos=[(4, 0)]))


# -- scribbles -------------------------------------------------------------------

def test_bresenham_endpoints_and_length():
    pts = P._bresenham((0, 0), (5, 3))
    assert pts[0] == (0, 0)
    assert pts[-1] == (5, 3)
    assert len(pts) == 6  # max(|dx|, |dy|) + 1


def test_scribble_rasterization_covers_line():
    mask = P.rasterize_scribble([[(1, 1), (6, 1)]], (8, 8))
    assert mask[1, 1] and mask[1, 6]
    assert mask[0, 3] and mask[2, 3]  # dilation radius 1
    assert not mask[4, 3]


def test_scribble_out_of_bounds():
    with pytest.raises(ValueError):
        P.rasterize_scribble([[(0, 0), (9, 0)]], (4, 4))


# -- kmeans ---------------------------------------------------------------------

def test_kmeans_two_cluster_oracle(rng):
    a = rng.normal(0, 0.01, size=(40, 3)) + np.array([1.0, 0.0, 0.0])
    b = rng.normal(0, 0.01, size=(40, 3)) + np.array([-1.0, 0.0, 0.0])
    x = np.concatenate([a, b])
    cents, assign = P.kmeans(x, 2, np.random.default_rng(0))
    cents = cents[np.argsort(cents[:, 0])]
    assert np.abs(cents[0] - b.mean(axis=0)).max() < 1e-3
    assert np.abs(cents[1] - a.mean(axis=0)).max() < 1e-3


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(50, 4))
    c1, _ = P.kmeans(x, 5, np.random.default_rng(3))
    c2, _ = P.kmeans(x, 5, np.random.default_rng(3))
    assert np.array_equal(c1, c2)


def test_kmeans_queries_constant_region_dedups():
    feats = np.tile(np.array([0.5, -1.0]), (6, 6, 1))
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:5, 1:5] = True
    qs = P.kmeans_queries(fmap_from(feats),
                          P.Prompt(view="v", kind="mask", mask_pos=mask))
    assert qs.positives.shape == (1, 2)
    assert qs.positives[0] == pytest.approx([0.5, -1.0])


def test_kmeans_queries_two_clusters(rng):
    feats = np.zeros((4, 8, 2))
    feats[:, :4] = [1.0, 0.0]
    feats[:, 4:] = [0.0, 1.0]
    mask = np.ones((4, 8), dtype=bool)
    qs = P.kmeans_queries(fmap_from(feats),
                          P.Prompt(view="v", kind="mask", mask_pos=mask,
                                   config_overrides={"kmeans_clusters": 2}))
    got = qs.positives[np.argsort(qs.positives[:, 0])]
    assert np.abs(got[0] - [0.0, 1.0]).max() < 1e-3
    assert np.abs(got[1] - [1.0, 0.0]).max() < 1e-3


def test_kmeans_queries_reduce_k_to_pixel_count(rng):
    feats = rng.normal(size=(4, 4, 2))
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = mask[1, 1] = True
    qs = P.kmeans_queries(fmap_from(feats),
                          P.Prompt(view="v", kind="mask", mask_pos=mask))
    assert qs.positives.shape[0] <= 2


def test_kmeans_queries_negative_region(rng):
    feats = rng.normal(size=(6, 6, 3))
    strokes_pos = [[(0, 0), (5, 0)]]
    strokes_neg = [[(0, 5), (5, 5)]]
    qs = P.kmeans_queries(fmap_from(feats), P.Prompt(
        view="v", kind="scribble", strokes_pos=strokes_pos, strokes_neg=strokes_neg))
    assert qs.negatives is not None


def test_kmeans_queries_permutation_invariant(rng):
    # same region expressed by different stroke orders gives identical queries
    feats = rng.normal(size=(8, 8, 3))
    s1 = [[(0, 0), (7, 0)], [(0, 3), (7, 3)]]
    s2 = [[(0, 3), (7, 3)], [(7, 0), (0, 0)]]
    q1 = P.kmeans_queries(fmap_from(feats), P.Prompt(view="v", kind="scribble",
                                                     strokes_pos=s1))
    q2 = P.kmeans_queries(fmap_from(feats), P.Prompt(view="v", kind="scribble",
                                                     strokes_pos=s2))
    assert np.array_equal(q1.positives, q2.positives)


def test_kmeans_queries_empty_region(rng):
    feats = rng.normal(size=(4, 4, 2))
    mask = np.zeros((4, 4), dtype=bool)
    with pytest.raises(ValueError):
        P.kmeans_queries(fmap_from(feats),
                         P.Prompt(view="v", kind="mask", mask_pos=mask))
    with pytest.raises(ValueError):
        P.Prompt(view="v", kind="mask", mask_pos=None)


# -- sam-based -------------------------------------------------------------------

def sam_fixture(separable=True):
    """Rendered map + guidance grid where the pooled query either matches
    the reference mask (accept) or straddles two opposed parts (fallback)."""
    c = 4
    h = w = 8
    e1 = np.array([1.0, 0.0, 0.0, 0.0])
    e2 = np.array([0.0, 1.0, 0.0, 0.0])
    feats = np.tile(-0.5 * (e1 + e2), (h, w, 1))
    m_ref = np.zeros((h, w), dtype=bool)
    m_ref[2:6, 1:7] = True
    if separable:
        feats[m_ref] = e1
        grid = np.tile(-e1, (4, 4, 1))
        grid[1:3, 0:4] = e1
    else:
        half1 = m_ref.copy(); half1[:, 4:] = False
        half2 = m_ref.copy(); half2[:, :4] = False
        feats[half1] = e1
        feats[half2] = -e1
        grid = np.tile(0.0 * e1, (4, 4, 1))
        grid[1:3, 0:2] = e1
        grid[1:3, 2:4] = -e1
    return fmap_from(feats), grid, m_ref


def test_sam_query_accept_path():
    fmap, grid, m_ref = sam_fixture(separable=True)
    qs = P.sam_based_queries(grid, fmap, m_ref)
    assert qs.metric == "dot"
    assert qs.provenance == "pooled"
    assert qs.positives.shape[0] == 1


def test_sam_query_fallback_path():
    fmap, grid, m_ref = sam_fixture(separable=False)
    qs = P.sam_based_queries(grid, fmap, m_ref,
                             P.PromptConfig(kmeans_clusters=2))
    assert qs.provenance == "kmeans"
    assert qs.positives.shape[0] == 2


def test_sam_query_zero_ratio_always_accepts():
    fmap, grid, m_ref = sam_fixture(separable=False)
    qs = P.sam_based_queries(grid, fmap, m_ref, P.PromptConfig(accept_ratio=0.0))
    assert qs.provenance == "pooled"


def test_sam_query_empty_mask_rejected():
    fmap, grid, _ = sam_fixture()
    with pytest.raises(ValueError, match="empty"):
        P.sam_based_queries(grid, fmap, np.zeros((8, 8), dtype=bool))


def test_sam_decision_is_deterministic():
    fmap, grid, m_ref = sam_fixture(separable=False)
    a = P.sam_based_queries(grid, fmap, m_ref)
    b = P.sam_based_queries(grid, fmap, m_ref)
    assert a.provenance == b.provenance
    assert np.array_equal(a.positives, b.positives)
