import numpy as np
import pytest

from gsseg import distill, masks as M, splat
from gsseg.errors import ConfigError
from gsseg.masks import GuidanceFeatureMap, MaskStack
from gsseg.scene import SynthSpec, synth_scene
from gsseg.estimator import SceneBundle


def numeric_grad(fn, x, eps=1e-3):
    """Central differences of a scalar function over an array."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += eps
        xm = x.copy(); xm[idx] -= eps
        grad[idx] = (fn(xp) - fn(xm)) / (2 * eps)
        it.iternext()
    return grad


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-10)
    return np.abs(a - b).max() / denom


# -- projector ---------------------------------------------------------------

def test_projector_zero_weights_zero_output(rng):
    proj = distill.Projector(6, 4, hidden_dim=8, rng=rng)
    for p in proj.params:
        p[:] = 0.0
    out = proj.forward(rng.normal(size=(3, 5, 6)))
    assert np.all(out == 0)


def test_projector_identity_passthrough(rng):
    c = 4
    proj = distill.Projector(c, c, hidden_dim=2 * c, rng=rng)
    proj.w1 = np.concatenate([np.eye(c), -np.eye(c)], axis=1)
    proj.b1[:] = 0.0
    proj.w2 = np.concatenate([np.eye(c), -np.eye(c)], axis=0)
    proj.b2[:] = 0.0
    x = rng.normal(size=(7, c))
    assert np.allclose(proj.forward(x), x, atol=1e-12)


def test_projector_matches_dense_oracle(rng):
    proj = distill.Projector(5, 3, hidden_dim=16, rng=rng)
    x = rng.normal(size=(4, 4, 5))
    flat = x.reshape(-1, 5)
    hidden = np.maximum(flat @ proj.w1 + proj.b1, 0.0)
    expected = (hidden @ proj.w2 + proj.b2).reshape(4, 4, 3)
    assert rel_err(proj.forward(x), expected) < 1e-5


def test_projector_dim_mismatch(rng):
    proj = distill.Projector(5, 3, rng=rng)
    with pytest.raises(ValueError):
        proj.forward(rng.normal(size=(2, 4)))


def test_projector_backward_matches_fd(rng):
    proj = distill.Projector(4, 3, hidden_dim=6, rng=rng)
    x = rng.normal(size=(5, 4))
    target = rng.normal(size=(5, 3))

    def loss_with(params):
        w1, b1, w2, b2 = params
        h = np.maximum(x @ w1 + b1, 0.0)
        return 0.5 * float((((h @ w2 + b2) - target) ** 2).sum())

    y, cache = proj._forward_flat(x)
    grads = proj._backward_flat(cache, y - target)
    for i, name in enumerate(("w1", "b1", "w2", "b2")):
        def fn(p, i=i):
            params = [q.copy() for q in proj.params]
            params[i] = p
            return loss_with(params)
        fd = numeric_grad(fn, proj.params[i].copy())
        assert rel_err(fd, grads[i]) < 1e-4, name


# -- mask_query ---------------------------------------------------------------

def test_mask_query_constant_grid(rng):
    grid = np.tile(np.array([1.0, -2.0, 3.0]), (4, 4, 1))
    mask = rng.random((4, 4)) < 0.5
    mask[0, 0] = True
    assert distill.mask_query(grid, mask) == pytest.approx([1.0, -2.0, 3.0])


def test_mask_query_two_cells():
    grid = np.zeros((2, 2, 2))
    grid[0, 0] = [1.0, 0.0]
    grid[1, 1] = [0.0, 1.0]
    mask = np.array([[True, False], [False, True]])
    assert distill.mask_query(grid, mask) == pytest.approx([0.5, 0.5])


def test_mask_query_random_matches_bruteforce(rng):
    grid = rng.normal(size=(6, 5, 7))
    mask = rng.random((6, 5)) < 0.4
    mask[2, 2] = True
    q = distill.mask_query(grid, mask)
    manual = np.zeros(7)
    count = 0
    for y in range(6):
        for x in range(5):
            if mask[y, x]:
                manual += grid[y, x]
                count += 1
    assert np.abs(q - manual / count).max() < 1e-6


def test_mask_query_empty_returns_none():
    assert distill.mask_query(np.zeros((3, 3, 2)), np.zeros((3, 3), dtype=bool)) is None


# -- guidance loss ------------------------------------------------------------

def test_guidance_loss_zero_query_is_log2(rng):
    rendered = rng.normal(size=(5, 5, 4))
    mask = rng.random((5, 5)) < 0.5
    loss, grad_r, grad_q = distill.guidance_loss(np.zeros(4), rendered, mask)
    assert loss == pytest.approx(np.log(2.0))


def test_guidance_loss_saturates_to_zero():
    rendered = np.zeros((4, 4, 2))
    mask = np.zeros((4, 4), dtype=bool)
    mask[:2] = True
    rendered[mask] = [50.0, 0.0]
    rendered[~mask] = [-50.0, 0.0]
    loss, _, _ = distill.guidance_loss(np.array([1.0, 0.0]), rendered, mask)
    assert loss < 1e-8


def test_guidance_loss_gradients_match_fd(rng):
    rendered = rng.normal(size=(4, 5, 3))
    mask = rng.random((4, 5)) < 0.4
    query = rng.normal(size=3)
    loss, grad_r, grad_q = distill.guidance_loss(query, rendered, mask)

    fd_r = numeric_grad(lambda r: distill.guidance_loss(query, r, mask)[0], rendered)
    fd_q = numeric_grad(lambda q: distill.guidance_loss(q, rendered, mask)[0], query)
    assert rel_err(fd_r, grad_r) < 1e-4
    assert rel_err(fd_q, grad_q) < 1e-4


# -- correspondence loss -------------------------------------------------------

def pair_batch(p1, p2, corr):
    return M.PairBatch(np.asarray(p1), np.asarray(p2), np.asarray(corr, dtype=float))


def test_corr_loss_identical_features():
    rendered = np.tile(np.array([1.0, 2.0]), (2, 2, 1))
    loss, grad = distill.correspondence_loss(rendered, pair_batch([0], [3], [1.0]))
    assert loss == pytest.approx(-1.0)


def test_corr_loss_orthogonal_features():
    rendered = np.zeros((1, 2, 2))
    rendered[0, 0] = [1.0, 0.0]
    rendered[0, 1] = [0.0, 1.0]
    loss, grad = distill.correspondence_loss(rendered, pair_batch([0], [1], [0.7]))
    assert loss == pytest.approx(0.0)


def test_corr_loss_gradient_matches_fd(rng):
    rendered = rng.normal(size=(3, 4, 3))
    n = 20
    p1 = rng.integers(0, 12, size=n)
    p2 = rng.integers(0, 12, size=n)
    corr = rng.uniform(-1, 1, size=n)
    batch = pair_batch(p1, p2, corr)
    loss, grad = distill.correspondence_loss(rendered, batch)
    fd = numeric_grad(lambda r: distill.correspondence_loss(r, batch)[0], rendered)
    assert rel_err(fd, grad) < 1e-4


def test_corr_loss_all_degenerate_warns(caplog):
    rendered = np.zeros((2, 2, 3))
    with caplog.at_level("WARNING"):
        loss, grad = distill.correspondence_loss(rendered, pair_batch([0], [1], [1.0]))
    assert loss == 0.0
    assert np.all(grad == 0)


# -- Adam ---------------------------------------------------------------------

def test_adam_minimizes_quadratic():
    x = np.array([5.0, -3.0])
    opt = distill.Adam([x], lr=0.1)
    for _ in range(500):
        opt.step([2 * x])
    assert np.abs(x).max() < 1e-3


# -- train --------------------------------------------------------------------

def make_training_setup(n_objects=2, m=40, views=3, size=24, seed=5, c_sam=8):
    spec = SynthSpec(n_objects=n_objects, gaussians_per_object=m, separation=5.0,
                     n_views=views, image_size=size, feature_dim=8, seed=seed)
    cloud, cams, labels = synth_scene(spec)
    bundle = SceneBundle(cloud=cloud, cameras=cams, labels=labels)
    bundle.warm_cache()
    stacks = M.synth_masks(cloud, cams, labels, levels=("object",),
                           weight_cache=bundle.weight_cache)
    gmaps = M.synth_guidance(cloud, cams, labels, c_sam=c_sam, grid_divisor=3,
                             weight_cache=bundle.weight_cache)
    return bundle, stacks, gmaps, labels


def test_train_disabled_losses_keep_features(rng):
    bundle, stacks, _, _ = make_training_setup()
    before = bundle.cloud.features.copy()
    cfg = distill.TrainConfig(iterations=20, lam=0.0, feature_dim=8, seed=0)
    res = distill.train(bundle.cloud, bundle.cameras, stacks, None, cfg,
                        weight_cache=bundle.weight_cache)
    assert np.array_equal(bundle.cloud.features, before)
    assert np.all(res.trace == 0.0)


def test_train_separates_objects():
    bundle, stacks, gmaps, labels = make_training_setup()
    cfg = distill.TrainConfig(iterations=200, pairs_per_view=256,
                              masks_per_step=8, feature_dim=8, seed=0)
    distill.train(bundle.cloud, bundle.cameras, stacks, gmaps, cfg,
                  weight_cache=bundle.weight_cache)
    f = bundle.cloud.features
    fn = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    gl = labels.gaussian_labels
    intra, inter = [], []
    for o in (1, 2):
        sel = fn[gl == o]
        sims = sel @ sel.T
        intra.append(np.mean(sims[~np.eye(len(sel), dtype=bool)]))
    cross = fn[gl == 1] @ fn[gl == 2].T
    inter.append(np.mean(cross))
    assert min(intra) > max(inter)


def test_train_loss_trend_decreasing():
    bundle, stacks, gmaps, _ = make_training_setup(seed=6)
    # learning rate low enough that 500 iterations stay in the descent phase
    cfg = distill.TrainConfig(iterations=500, pairs_per_view=256,
                              masks_per_step=8, feature_dim=8, seed=0,
                              lr_features=1e-4, lr_projector=1e-4)
    res = distill.train(bundle.cloud, bundle.cameras, stacks, gmaps, cfg,
                        weight_cache=bundle.weight_cache)
    window = res.trace[:, 2].reshape(5, 100).mean(axis=1)
    assert np.all(np.diff(window) < 0)


def test_train_never_mutates_frozen_attributes():
    bundle, stacks, gmaps, _ = make_training_setup(seed=8)
    snap = bundle.cloud.frozen_snapshot()
    cfg = distill.TrainConfig(iterations=60, pairs_per_view=128,
                              masks_per_step=4, feature_dim=8, seed=0)
    distill.train(bundle.cloud, bundle.cameras, stacks, gmaps, cfg,
                  weight_cache=bundle.weight_cache)
    for name, before in snap.items():
        assert np.array_equal(getattr(bundle.cloud, name), before), name


def test_train_deterministic():
    results = []
    for _ in range(2):
        bundle, stacks, gmaps, _ = make_training_setup(seed=9)
        cfg = distill.TrainConfig(iterations=50, pairs_per_view=64,
                                  masks_per_step=4, feature_dim=8, seed=3)
        res = distill.train(bundle.cloud, bundle.cameras, stacks, gmaps, cfg,
                            weight_cache=bundle.weight_cache)
        results.append((res.features.copy(), res.trace.copy()))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])


def test_train_requires_stack_per_view():
    bundle, stacks, gmaps, _ = make_training_setup()
    missing = dict(stacks)
    missing.pop(bundle.cameras[0].id)
    cfg = distill.TrainConfig(iterations=5, feature_dim=8)
    with pytest.raises(ConfigError, match="mask stack"):
        distill.train(bundle.cloud, bundle.cameras, missing, gmaps, cfg)


def test_train_requires_guidance_everywhere():
    bundle, stacks, gmaps, _ = make_training_setup()
    partial = dict(gmaps)
    partial.pop(bundle.cameras[1].id)
    cfg = distill.TrainConfig(iterations=5, feature_dim=8)
    with pytest.raises(ConfigError, match="guidance"):
        distill.train(bundle.cloud, bundle.cameras, stacks, partial, cfg)


def test_ablation_paths_run_end_to_end():
    for lam, guidance_on in ((0.0, True), (1.0, False)):
        bundle, stacks, gmaps, _ = make_training_setup(seed=11)
        cfg = distill.TrainConfig(iterations=30, pairs_per_view=64,
                                  masks_per_step=4, feature_dim=8, seed=0, lam=lam)
        res = distill.train(bundle.cloud, bundle.cameras, stacks,
                            gmaps if guidance_on else None, cfg,
                            weight_cache=bundle.weight_cache)
        assert res.trace.shape == (30, 3)


# -- sidecar ------------------------------------------------------------------

def test_sidecar_roundtrip(tmp_path, rng):
    bundle, stacks, gmaps, _ = make_training_setup(seed=13)
    cfg = distill.TrainConfig(iterations=10, pairs_per_view=64,
                              masks_per_step=4, feature_dim=8, seed=1)
    res = distill.train(bundle.cloud, bundle.cameras, stacks, gmaps, cfg,
                        weight_cache=bundle.weight_cache)
    path = tmp_path / "feat.gsfeat"
    distill.save_features(path, res)
    feats, proj, manifest = distill.load_features(path)
    assert np.abs(feats - res.features).max() < 1e-6
    assert manifest["C"] == 8
    assert manifest["lambda"] == 1.0
    assert manifest["seed"] == 1
    assert proj is not None
    x = rng.normal(size=(3, proj.in_dim))
    assert np.abs(proj.forward(x) - res.projector.forward(x)).max() < 1e-4


def test_sidecar_without_projector(tmp_path):
    bundle, stacks, _, _ = make_training_setup(seed=14)
    cfg = distill.TrainConfig(iterations=5, pairs_per_view=64,
                              masks_per_step=4, feature_dim=8, seed=1)
    res = distill.train(bundle.cloud, bundle.cameras, stacks, None, cfg,
                        weight_cache=bundle.weight_cache)
    path = tmp_path / "feat.gsfeat"
    distill.save_features(path, res)
    feats, proj, manifest = distill.load_features(path)
    assert proj is None
    assert manifest["has_projector"] is False
