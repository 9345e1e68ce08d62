import numpy as np
import pytest

from gsseg.scene import SynthSpec, synth_scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_scene():
    """2 objects x 12 Gaussians, 2 views at 12x12 px. For gradient checks."""
    spec = SynthSpec(n_objects=2, gaussians_per_object=12, separation=4.0,
                     n_views=2, image_size=12, feature_dim=4, seed=7)
    return synth_scene(spec)


@pytest.fixture
def small_scene():
    """3 objects x 120 Gaussians, 4 views at 48x48 px."""
    spec = SynthSpec(n_objects=3, gaussians_per_object=120, separation=6.0,
                     n_views=4, image_size=48, seed=3)
    return synth_scene(spec)


def blend_oracle(cloud, camera, attributes=None):
    """Sequential per-pixel front-to-back blending, independent of the
    vectorized rasterizer. Returns (blended map, accumulated alpha)."""
    from gsseg import splat

    attributes = cloud.features if attributes is None else attributes
    proj = splat.project(cloud, camera)
    h, w = camera.height, camera.width
    out = np.zeros((h, w, attributes.shape[1]))
    alpha_map = np.zeros((h, w))
    inv = [np.linalg.inv(proj.cov2d[i]) for i in range(len(proj))]
    for y in range(h):
        for x in range(w):
            p = np.array([x + 0.5, y + 0.5])
            t = 1.0
            for i in range(len(proj)):
                d = p - proj.means2d[i]
                power = -0.5 * d @ inv[i] @ d
                alpha = min(cloud.opacities[proj.indices[i]] * np.exp(power),
                            splat.ALPHA_CLAMP)
                if alpha < splat.ALPHA_SKIP:
                    continue
                if t < splat.EARLY_STOP_T:
                    break
                out[y, x] += t * alpha * attributes[proj.indices[i]]
                t *= 1.0 - alpha
            alpha_map[y, x] = 1.0 - t
    return out, alpha_map
