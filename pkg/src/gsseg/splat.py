"""Software feature/color rasterizer for Gaussian clouds.

Front-to-back alpha blending over depth-sorted splats. Because geometry,
opacity and color are frozen, every pixel's blend weights are a fixed
linear map from per-Gaussian attributes to the rendered image; we compute
that map once per view as a sparse matrix and reuse it for color, feature
and gradient passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .scene import Camera, GaussianCloud

# constants follow the reference 3DGS rasterizer
LOW_PASS = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
EARLY_STOP_T = 1e-4     # stop blending once transmittance drops below this
NEAR_PLANE = 0.2
CULL_SIGMA = 3.0
# beyond sqrt(2 ln(0.99 * 255)) = 3.33 sigma every alpha is below the skip
# threshold, so a 3.4-sigma footprint loses no contribution
FOOTPRINT_SIGMA = 3.4


@dataclass
class Projected2D:
    """One splat after projection (record view into a Projection)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int


class Projection:
    """Splats that survived culling, sorted by ascending depth."""

    def __init__(self, means2d, cov2d, depths, indices):
        self.means2d = means2d
        self.cov2d = cov2d
        self.depths = depths
        self.indices = indices

    def __len__(self):
        return len(self.depths)

    def __getitem__(self, i) -> Projected2D:
        return Projected2D(self.means2d[i], self.cov2d[i],
                           float(self.depths[i]), int(self.indices[i]))


@dataclass
class FeatureMap:
    """Rendered per-pixel features plus the accumulated alpha channel."""

    features: np.ndarray  # (H, W, C)
    alpha: np.ndarray     # (H, W)

    @property
    def shape(self):
        return self.features.shape

    def at(self, x: int, y: int) -> np.ndarray:
        return self.features[y, x]


def _quat_to_rotmats(quats: np.ndarray) -> np.ndarray:
    """Unit wxyz quaternions (N,4) -> rotation matrices (N,3,3)."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    out = np.empty((len(quats), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def covariance_3d(cloud: GaussianCloud) -> np.ndarray:
    """World-space covariances (N,3,3) from scales and rotations."""
    rot = _quat_to_rotmats(cloud.rotations)
    m = rot * cloud.scales[:, None, :]
    return m @ m.transpose(0, 2, 1)


def project(cloud: GaussianCloud, camera: Camera, near: float = NEAR_PLANE) -> Projection:
    """EWA projection of all splats; culls near-plane and frustum misses.

    2D covariance is J W Sigma W^T J^T with J the perspective Jacobian at
    the mean, plus the low-pass floor on the diagonal.
    """
    t = camera.to_camera(cloud.positions)
    tz = t[:, 2]
    in_front = tz > near
    if not in_front.any():
        return Projection(np.empty((0, 2)), np.empty((0, 2, 2)),
                          np.empty(0), np.empty(0, dtype=np.int64))

    idx = np.flatnonzero(in_front)
    t = t[idx]
    tz = t[:, 2]
    u = camera.fx * t[:, 0] / tz + camera.cx
    v = camera.fy * t[:, 1] / tz + camera.cy

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = camera.fx / tz
    jac[:, 0, 2] = -camera.fx * t[:, 0] / tz**2
    jac[:, 1, 1] = camera.fy / tz
    jac[:, 1, 2] = -camera.fy * t[:, 1] / tz**2

    a = jac @ camera.rotation  # (M,2,3)
    sigma = covariance_3d(cloud)[idx]
    cov2d = a @ sigma @ a.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS

    # 3-sigma frustum test on the projected footprint
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(
        0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2, 0.0
    ))
    radius = CULL_SIGMA * np.sqrt(np.maximum(mid + disc, 0.0))
    visible = ((u + radius > 0) & (u - radius < camera.width)
               & (v + radius > 0) & (v - radius < camera.height))

    idx = idx[visible]
    order = np.argsort(tz[visible], kind="stable")
    means2d = np.stack([u[visible], v[visible]], axis=1)[order]
    return Projection(means2d, cov2d[visible][order],
                      tz[visible][order], idx[order])


def alpha_at(proj: Projected2D, opacity: float, pixel) -> float:
    """Splat alpha at a pixel center, clamped to ALPHA_CLAMP."""
    d = np.asarray(pixel, dtype=np.float64) - proj.mean2d
    inv = np.linalg.inv(proj.cov2d)
    power = -0.5 * d @ inv @ d
    return float(min(opacity * np.exp(power), ALPHA_CLAMP))


class BlendWeights:
    """Per-view blend weights: pixel p gets sum_i w[p,i] * attribute[i].

    `matrix` is (H*W, N) CSR; `alpha` is the per-pixel accumulated alpha
    (one minus the final transmittance, identical to the row sums of
    `matrix` up to roundoff).
    """

    def __init__(self, matrix: sparse.csr_matrix, alpha: np.ndarray, shape):
        self.matrix = matrix
        self.alpha = alpha
        self.shape = shape

    def render(self, attributes: np.ndarray) -> np.ndarray:
        """Blend any per-Gaussian attribute array (N, K) -> (H, W, K)."""
        attributes = np.asarray(attributes, dtype=np.float64)
        flat = self.matrix @ attributes
        return flat.reshape(self.shape + attributes.shape[1:])

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Adjoint of render: (H, W, K) gradient -> (N, K) gradient."""
        k = upstream.shape[-1]
        return np.asarray(self.matrix.T @ upstream.reshape(-1, k))

    def weight_at(self, pixels_lin: np.ndarray, gaussians: np.ndarray) -> np.ndarray:
        """Blend weight of specific (pixel, gaussian) pairs."""
        vals = self.matrix[pixels_lin, gaussians]
        return np.asarray(vals).reshape(-1)


def compute_blend_weights(cloud: GaussianCloud, camera: Camera,
                          near: float = NEAR_PLANE) -> BlendWeights:
    """Rasterize the cloud's footprint into a sparse pixel-weight matrix."""
    h, w = camera.height, camera.width
    n_pix = h * w
    proj = project(cloud, camera, near)
    empty = BlendWeights(
        sparse.csr_matrix((n_pix, cloud.count)), np.zeros((h, w)), (h, w)
    )
    if len(proj) == 0:
        return empty

    cov = proj.cov2d
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det

    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(mid + disc)

    u, v = proj.means2d[:, 0], proj.means2d[:, 1]
    x0 = np.clip(np.floor(u - radius - 0.5), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.ceil(u + radius - 0.5), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(v - radius - 0.5), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.ceil(v + radius - 0.5), 0, h - 1).astype(np.int64)
    widths = x1 - x0 + 1
    heights = y1 - y0 + 1
    areas = widths * heights

    # flatten all per-splat patches into one ragged enumeration
    offsets = np.concatenate([[0], np.cumsum(areas)])
    total = int(offsets[-1])
    if total == 0:
        return empty
    gflat = np.repeat(np.arange(len(proj)), areas)
    t = np.arange(total, dtype=np.int64) - np.repeat(offsets[:-1], areas)
    px = x0[gflat] + t % widths[gflat]
    py = y0[gflat] + t // widths[gflat]

    dx = px + 0.5 - u[gflat]
    dy = py + 0.5 - v[gflat]
    power = -0.5 * (inv_a[gflat] * dx * dx + inv_c[gflat] * dy * dy) \
        - inv_b[gflat] * dx * dy
    alpha = cloud.opacities[proj.indices[gflat]] * np.exp(np.minimum(power, 0.0))
    alpha = np.minimum(alpha, ALPHA_CLAMP)

    keep = alpha >= ALPHA_SKIP
    pix = (py * w + px)[keep]
    gauss = proj.indices[gflat[keep]]
    alpha = alpha[keep]
    if len(alpha) == 0:
        return empty

    # contributions were generated in depth order; a stable sort by pixel
    # therefore yields front-to-back order within each pixel run
    order = np.argsort(pix, kind="stable")
    pix = pix[order]
    gauss = gauss[order]
    alpha = alpha[order]

    seg_start = np.flatnonzero(np.concatenate([[True], pix[1:] != pix[:-1]]))
    seg_len = np.diff(np.concatenate([seg_start, [len(pix)]]))

    log_one_minus = np.log1p(-alpha)
    csum = np.cumsum(log_one_minus)
    log_t_before = np.concatenate([[0.0], csum[:-1]])
    seg_base = np.concatenate([[0.0], csum])[seg_start]
    log_t_before = log_t_before - np.repeat(seg_base, seg_len)
    t_before = np.exp(log_t_before)

    alive = t_before >= EARLY_STOP_T
    weights = alpha * t_before

    # accumulated alpha = 1 - prod(1 - alpha_i) over surviving contributions
    final_log_t = np.add.reduceat(np.where(alive, log_one_minus, 0.0), seg_start)
    alpha_map = np.zeros(n_pix)
    alpha_map[pix[seg_start]] = 1.0 - np.exp(final_log_t)

    matrix = sparse.csr_matrix(
        (weights[alive], (pix[alive], gauss[alive])),
        shape=(n_pix, cloud.count),
    )
    return BlendWeights(matrix, alpha_map.reshape(h, w), (h, w))


def render_features(cloud: GaussianCloud, camera: Camera,
                    weights: BlendWeights | None = None) -> FeatureMap:
    """Blend per-Gaussian features into an (H, W, C) map."""
    if weights is None:
        weights = compute_blend_weights(cloud, camera)
    return FeatureMap(weights.render(cloud.features), weights.alpha)


def render_color(cloud: GaussianCloud, camera: Camera,
                 weights: BlendWeights | None = None,
                 background=None) -> np.ndarray:
    """Blend colors into an (H, W, 3) image; unfilled area gets `background`."""
    if weights is None:
        weights = compute_blend_weights(cloud, camera)
    img = weights.render(cloud.colors)
    if background is not None:
        img = img + (1.0 - weights.alpha)[..., None] * np.asarray(background)
    return img


def backward_features(cloud: GaussianCloud, camera: Camera, upstream: np.ndarray,
                      weights: BlendWeights | None = None) -> np.ndarray:
    """Gradient of the rendered features w.r.t. per-Gaussian features.

    Rendering is linear in the features, so the pullback of an (H, W, C)
    upstream gradient is the transposed weight matrix applied to it.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if weights is None:
        weights = compute_blend_weights(cloud, camera)
    expected = weights.shape + (cloud.feature_dim,)
    if upstream.shape != expected:
        raise ValueError(f"upstream has shape {upstream.shape}, expected {expected}")
    return weights.backward(upstream)


def render_label_weights(cloud: GaussianCloud, labels: np.ndarray, n_labels: int,
                         weights: BlendWeights) -> np.ndarray:
    """Per-pixel summed blend weight for each label value (H, W, n_labels)."""
    onehot = np.zeros((cloud.count, n_labels))
    onehot[np.arange(cloud.count), np.asarray(labels, dtype=np.int64)] = 1.0
    return weights.render(onehot)
