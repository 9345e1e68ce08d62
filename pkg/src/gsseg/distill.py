"""Contrastive distillation of 2D masks into per-Gaussian features.

Two losses drive training: a guidance BCE that segments the rendered
feature map with queries pooled from projected guidance features, and a
correspondence term that pulls the cosine similarity of pixel pairs
toward the sign of their mask-IoU correspondence. Geometry, opacity and
color stay frozen; only the features and the projector MLP move.
"""

from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import dataclass

import numpy as np

from . import masks as masks_mod
from . import splat, tensorio
from .errors import ConfigError, FormatError
from .scene import GaussianCloud

log = logging.getLogger(__name__)

FEATURE_INIT_RANGE = 1e-4
SIDECAR_MANIFEST = "manifest.json"


def init_features(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Near-zero uniform init so early sigmoid outputs sit at ~0.5."""
    return rng.uniform(-FEATURE_INIT_RANGE, FEATURE_INIT_RANGE, size=(count, dim))


@dataclass
class TrainConfig:
    iterations: int = 20000
    lam: float = 1.0                 # correspondence loss weight
    lr_features: float = 2.5e-3
    lr_projector: float = 1e-3
    pairs_per_view: int = 4096
    masks_per_step: int = 16
    feature_dim: int = 32
    hidden_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


class Projector:
    """One-hidden-layer MLP mapping guidance channels down to feature dim."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int = 256,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden_dim = hidden_dim
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, hidden_dim))
        self.b1 = np.zeros(hidden_dim)
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / hidden_dim), size=(hidden_dim, out_dim))
        self.b2 = np.zeros(out_dim)

    @property
    def params(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Pointwise application over the leading dimensions of x."""
        lead = x.shape[:-1]
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input has {x.shape[-1]} channels, expected {self.in_dim}")
        y, _ = self._forward_flat(x.reshape(-1, self.in_dim))
        return y.reshape(lead + (self.out_dim,))

    def _forward_flat(self, x: np.ndarray):
        h = x @ self.w1 + self.b1
        a = np.maximum(h, 0.0)
        return a @ self.w2 + self.b2, (x, h, a)

    def _backward_flat(self, cache, dy: np.ndarray) -> list:
        x, h, a = cache
        dw2 = a.T @ dy
        db2 = dy.sum(axis=0)
        da = dy @ self.w2.T
        dh = da * (h > 0)
        dw1 = x.T @ dh
        db1 = dh.sum(axis=0)
        return [dw1, db1, dw2, db2]


def project_guidance(gfm: masks_mod.GuidanceFeatureMap, proj: Projector) -> np.ndarray:
    """Project the guidance grid cellwise into feature space (Hf, Wf, C)."""
    return proj.forward(gfm.grid)


def mask_query(fprime: np.ndarray, mask_ds: np.ndarray):
    """Masked average pooling over grid cells; None if the mask is empty."""
    mask_ds = np.asarray(mask_ds, dtype=bool)
    if mask_ds.shape != fprime.shape[:2]:
        raise ValueError("downsampled mask does not match the feature grid")
    if not mask_ds.any():
        return None
    return fprime[mask_ds].mean(axis=0)


def guidance_loss(query: np.ndarray, rendered: np.ndarray, mask: np.ndarray):
    """Mean BCE of sigmoid(query . F_p) against the mask.

    Returns (loss, grad wrt rendered, grad wrt query). The BCE is computed
    from logits for stability.
    """
    h, w, c = rendered.shape
    if mask.shape != (h, w):
        raise ValueError("mask does not match rendered map")
    flat = rendered.reshape(-1, c)
    target = mask.reshape(-1).astype(np.float64)
    z = flat @ query
    loss = float(np.mean(np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))))
    dz = (1.0 / (1.0 + np.exp(-z)) - target) / z.size
    grad_rendered = (dz[:, None] * query[None, :]).reshape(h, w, c)
    grad_query = flat.T @ dz
    return loss, grad_rendered, grad_query


def correspondence_loss(rendered: np.ndarray, pairs: masks_mod.PairBatch):
    """Negative mean of corr-weighted cosine similarity over pixel pairs.

    Pairs whose rendered feature norm is ~0 at either pixel carry no
    direction and are skipped; all pairs degenerate yields zero loss.
    """
    h, w, c = rendered.shape
    flat = rendered.reshape(-1, c)
    u = flat[pairs.p1]
    v = flat[pairs.p2]
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    kept = (nu > 1e-8) & (nv > 1e-8)
    if not kept.any():
        log.warning("correspondence loss: all %d pairs degenerate", len(pairs))
        return 0.0, np.zeros_like(rendered)

    u, v = u[kept], v[kept]
    nu, nv = nu[kept], nv[kept]
    k = pairs.corr[kept]
    inv = 1.0 / (nu * nv)
    cos = np.einsum("ij,ij->i", u, v) * inv
    n = len(k)
    loss = float(-np.sum(k * cos) / n)

    coef = (-k / n)
    du = coef[:, None] * (v * inv[:, None] - u * (cos / nu**2)[:, None])
    dv = coef[:, None] * (u * inv[:, None] - v * (cos / nv**2)[:, None])
    grad = np.zeros_like(flat)
    np.add.at(grad, pairs.p1[kept], du)
    np.add.at(grad, pairs.p2[kept], dv)
    return loss, grad.reshape(h, w, c)


class Adam:
    """Adaptive moment optimizer over a list of parameter arrays."""

    def __init__(self, params: list, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


class _GradientBalance:
    """RMS-normalizes the per-loss feature gradients before summing them.

    Tracks an exponential moving average of each term's squared gradient;
    dividing by its root makes the balance between the guidance and
    correspondence forces scale-free, so lam weights forces rather than
    incomparable raw magnitudes. Normalization happens in feature space
    (after the rasterizer pullback) so pixels that render nothing do not
    dilute a term's budget.
    """

    def __init__(self, decay: float = 0.99, eps: float = 1e-12):
        self.decay = decay
        self.eps = eps
        self.ema = {"guidance": 0.0, "corr": 0.0}
        self.steps = {"guidance": 0, "corr": 0}

    def _normalized(self, name: str, grad: np.ndarray) -> np.ndarray:
        power = float(np.mean(grad * grad))
        if power == 0.0:
            return grad
        self.steps[name] += 1
        self.ema[name] = self.decay * self.ema[name] + (1.0 - self.decay) * power
        corrected = self.ema[name] / (1.0 - self.decay ** self.steps[name])
        return grad / np.sqrt(corrected + self.eps)

    # Relative force of the guidance term against a lam=1 correspondence
    # term. The guidance BCE must win the contested directions (it is the
    # only term that can disambiguate inconsistent mask groupings), while
    # the correspondence term compacts within-object features; this ratio
    # was calibrated on the synthetic benchmark.
    GUIDANCE_GAIN = 6.0

    def combine(self, grad_guidance, grad_corr, lam: float, shape) -> np.ndarray:
        out = np.zeros(shape)
        if grad_guidance is not None:
            out += self.GUIDANCE_GAIN * self._normalized("guidance", grad_guidance)
        if grad_corr is not None and lam > 0:
            out += lam * self._normalized("corr", grad_corr)
        return out


@dataclass
class TrainResult:
    features: np.ndarray
    projector: Projector | None
    trace: np.ndarray      # (iterations, 3): guidance, correspondence, total
    config: TrainConfig


def train(cloud: GaussianCloud, cameras, stacks: dict, guidance: dict | None,
          cfg: TrainConfig, weight_cache: dict | None = None,
          progress=None) -> TrainResult:
    """Distill the mask stacks (and optional guidance maps) into features.

    One view per iteration, round-robin. Guidance maps must cover every
    camera or be absent entirely; absent guidance disables the BCE term
    (ablation path), lam=0 disables the correspondence term.
    """
    for cam in cameras:
        if cam.id not in stacks:
            raise ConfigError(f"camera {cam.id} has no mask stack")
        if stacks[cam.id].image_shape != (cam.height, cam.width):
            raise ConfigError(f"mask stack {cam.id} does not match its camera")
    use_guidance = bool(guidance)
    if use_guidance:
        missing = [cam.id for cam in cameras if cam.id not in guidance]
        if missing:
            raise ConfigError(f"guidance maps missing for views: {missing}")
    if cloud.feature_dim != cfg.feature_dim:
        raise ConfigError(
            f"cloud feature dim {cloud.feature_dim} != config {cfg.feature_dim}"
        )

    rng = np.random.default_rng(cfg.seed)
    features = cloud.features.copy()

    projector = None
    guidance_cells = {}
    if use_guidance:
        c_sam = guidance[cameras[0].id].channels
        projector = Projector(c_sam, cfg.feature_dim, cfg.hidden_dim,
                              rng=np.random.default_rng(rng.integers(2**31)))
        for cam in cameras:
            gfm = guidance[cam.id]
            if gfm.channels != c_sam:
                raise ConfigError("guidance channel count differs across views")
            grid_shape = gfm.grid_shape
            cells = []
            for mask in stacks[cam.id].masks:
                ds = masks_mod.downsample_mask(mask, grid_shape)
                cells.append(np.flatnonzero(ds.reshape(-1)))
            guidance_cells[cam.id] = cells

    weights = {}
    for cam in cameras:
        cached = None if weight_cache is None else weight_cache.get(cam.id)
        weights[cam.id] = cached or splat.compute_blend_weights(cloud, cam)

    opt_features = Adam([features], cfg.lr_features)
    opt_projector = Adam(projector.params, cfg.lr_projector) if projector else None

    # The two mean-reduced losses produce gradients orders of magnitude
    # apart (the cosine term scales with 1/|f|, the BCE with 1/HW), so the
    # per-term gradients are RMS-normalized before they are combined; this
    # is what keeps lam=1 an actual balance between the terms.
    balance = _GradientBalance()

    trace = np.zeros((cfg.iterations, 3))
    for it in range(cfg.iterations):
        cam = cameras[it % len(cameras)]
        stack = stacks[cam.id]
        w = weights[cam.id]
        fmap = w.render(features)
        loss_g = 0.0
        loss_c = 0.0
        grad_guidance = None
        grad_corr = None

        if use_guidance:
            gfm = guidance[cam.id]
            flat_grid = gfm.grid.reshape(-1, gfm.channels)
            fprime, cache = projector._forward_flat(flat_grid)
            dy = np.zeros_like(fprime)
            grad_guidance = np.zeros_like(fmap)
            m_total = stack.count
            take = min(cfg.masks_per_step, m_total)
            chosen = rng.choice(m_total, size=take, replace=False)
            used = 0
            for mi in chosen:
                cells = guidance_cells[cam.id][mi]
                if len(cells) == 0:
                    continue
                query = fprime[cells].mean(axis=0)
                l, g_map, g_query = guidance_loss(query, fmap, stack.masks[mi])
                loss_g += l
                grad_guidance += g_map
                dy[cells] += g_query / len(cells)
                used += 1
            if used > 0:
                loss_g /= used
                grad_guidance /= used
                dy /= used
                grads = projector._backward_flat(cache, dy)
                opt_projector.step(grads)
            else:
                grad_guidance = None

        if cfg.lam > 0:
            pairs = masks_mod.sample_pairs(stack, cfg.pairs_per_view, rng)
            loss_c, grad_corr = correspondence_loss(fmap, pairs)

        grad_features = balance.combine(
            None if grad_guidance is None else w.backward(grad_guidance),
            None if grad_corr is None else w.backward(grad_corr),
            cfg.lam, features.shape,
        )
        opt_features.step([grad_features])
        trace[it] = (loss_g, loss_c, loss_g + cfg.lam * loss_c)
        if progress is not None:
            progress(it, trace[it])

    cloud.publish_features(features)
    return TrainResult(features=features, projector=projector, trace=trace, config=cfg)


# ---------------------------------------------------------------------------
# Feature sidecar (zip of GSTEN tensors + JSON manifest)
# ---------------------------------------------------------------------------

def save_features(path, result: TrainResult) -> None:
    cfg = result.config
    manifest = {
        "C": cfg.feature_dim,
        "C_sam": result.projector.in_dim if result.projector else None,
        "iterations": cfg.iterations,
        "lambda": cfg.lam,
        "seed": cfg.seed,
        "hidden_dim": cfg.hidden_dim,
        "has_projector": result.projector is not None,
    }
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(SIDECAR_MANIFEST, json.dumps(manifest, indent=2))
        zf.writestr("features.gsten",
                    tensorio.encode_tensor(result.features.astype(np.float32)))
        if result.projector is not None:
            names = ("w1", "b1", "w2", "b2")
            for name, param in zip(names, result.projector.params):
                zf.writestr(f"projector_{name}.gsten",
                            tensorio.encode_tensor(param.astype(np.float32)))


def load_features(path):
    """Read a sidecar -> (features, projector | None, manifest dict)."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(SIDECAR_MANIFEST))
            features = tensorio.decode_tensor(zf.read("features.gsten"))
            projector = None
            if manifest.get("has_projector"):
                parts = {
                    name: tensorio.decode_tensor(zf.read(f"projector_{name}.gsten"))
                    for name in ("w1", "b1", "w2", "b2")
                }
                projector = Projector(parts["w1"].shape[0], parts["w2"].shape[1],
                                      parts["w1"].shape[1])
                projector.w1 = parts["w1"].astype(np.float64)
                projector.b1 = parts["b1"].astype(np.float64)
                projector.w2 = parts["w2"].astype(np.float64)
                projector.b2 = parts["b2"].astype(np.float64)
    except (KeyError, zipfile.BadZipFile) as exc:
        raise FormatError(f"{path}: not a valid feature sidecar ({exc})") from exc
    return features.astype(np.float64), projector, manifest
