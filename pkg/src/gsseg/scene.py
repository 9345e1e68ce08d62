"""Scene data: Gaussian clouds, cameras, ground-truth labels and their files.

In-memory attributes are kept in constrained ranges (opacity in (0,1),
positive scales, unit quaternions). The PLY files follow the common 3DGS
layout instead: opacity as a logit, scales as logs, color as the SH DC
coefficient. Conversion happens on load/save.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

# DC spherical-harmonics basis constant: rgb = SH_C0 * f_dc + 0.5
SH_C0 = 0.28209479177387814

PLY_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

CAMERA_SCHEMA_VERSION = 1


@dataclass
class GaussianCloud:
    """N Gaussians with frozen geometry/appearance plus trainable features.

    positions (N,3), scales (N,3) positive, rotations (N,4) unit wxyz
    quaternions, opacities (N,) in (0,1), colors (N,3) in [0,1],
    features (N,C).

    Everything except `features` is immutable after construction. The
    feature block has a single-writer / multi-reader contract: training
    prepares a full replacement array and publishes it atomically via
    `publish_features`, so readers never see a partially written row.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(self.scales, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float64))
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        validate_cloud(self)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def publish_features(self, features: np.ndarray) -> None:
        """Atomically replace the whole feature block (single writer)."""
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != self.count:
            raise ValueError(
                f"feature rows {features.shape[0]} != gaussian count {self.count}"
            )
        if not np.all(np.isfinite(features)):
            raise DataError("features contain non-finite values")
        self.features = features

    def subset(self, mask: np.ndarray) -> "GaussianCloud":
        """New cloud containing only the selected Gaussians (copies)."""
        mask = np.asarray(mask)
        return GaussianCloud(
            positions=self.positions[mask].copy(),
            scales=self.scales[mask].copy(),
            rotations=self.rotations[mask].copy(),
            opacities=self.opacities[mask].copy(),
            colors=self.colors[mask].copy(),
            features=self.features[mask].copy(),
        )

    def frozen_snapshot(self) -> dict:
        """Copies of the frozen attribute blocks, for mutation checks."""
        return {
            "positions": self.positions.copy(),
            "scales": self.scales.copy(),
            "rotations": self.rotations.copy(),
            "opacities": self.opacities.copy(),
            "colors": self.colors.copy(),
        }


def validate_cloud(cloud: GaussianCloud) -> None:
    n = cloud.positions.shape[0]
    for name in ("positions", "scales", "colors"):
        arr = getattr(cloud, name)
        if arr.shape != (n, 3):
            raise DataError(f"{name} has shape {arr.shape}, expected ({n}, 3)")
    if cloud.rotations.shape != (n, 4):
        raise DataError(f"rotations have shape {cloud.rotations.shape}")
    if cloud.opacities.shape != (n,):
        raise DataError(f"opacities have shape {cloud.opacities.shape}")
    if cloud.features.ndim != 2 or cloud.features.shape[0] != n:
        raise DataError(f"features have shape {cloud.features.shape}")

    for name in ("positions", "scales", "rotations", "opacities", "colors", "features"):
        arr = getattr(cloud, name)
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.argwhere(bad)[0][0])
            raise DataError(f"non-finite value in {name} at element {idx}")

    if np.any(cloud.scales <= 0):
        idx = int(np.argwhere(cloud.scales <= 0)[0][0])
        raise DataError(f"non-positive scale at element {idx}")
    if np.any(cloud.opacities <= 0) or np.any(cloud.opacities >= 1):
        idx = int(np.argwhere((cloud.opacities <= 0) | (cloud.opacities >= 1))[0][0])
        raise DataError(f"opacity outside (0,1) at element {idx}")
    norms = np.linalg.norm(cloud.rotations, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        idx = int(np.argmax(np.abs(norms - 1.0)))
        raise DataError(f"quaternion not unit-norm at element {idx}")


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera pose."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # 4x4, x right / y down / z forward
    id: str = "view"

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.world_to_camera.shape != (4, 4):
            raise DataError("world_to_camera must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        rot = self.rotation
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5):
            raise DataError(f"camera {self.id}: rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (N,3) -> camera-space points (N,3)."""
        return points @ self.rotation.T + self.translation

    @staticmethod
    def look_at(eye, target, width, height, fov_deg=60.0, up=(0.0, 0.0, 1.0),
                cam_id="view"):
        """Camera at `eye` looking at `target`, square-pixel pinhole."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("eye and target coincide")
        z = forward / norm
        x = np.cross(z, up)
        xn = np.linalg.norm(x)
        if xn < 1e-8:
            # looking along the up axis; pick any horizontal right vector
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
            xn = np.linalg.norm(x)
        x = x / xn
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        f = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
        return Camera(width=width, height=height, fx=f, fy=f,
                      cx=width / 2.0, cy=height / 2.0,
                      world_to_camera=w2c, id=cam_id)


@dataclass
class GroundTruthLabels:
    """Per-Gaussian object labels; 0 means background."""

    gaussian_labels: np.ndarray

    def __post_init__(self):
        self.gaussian_labels = np.asarray(self.gaussian_labels, dtype=np.int64)
        labels = np.unique(self.gaussian_labels)
        expected = np.arange(labels.min(), labels.max() + 1)
        if labels.min() < 0 or not np.array_equal(
            labels, expected[np.isin(expected, labels)]
        ) or (labels.max() + 1 - labels.min()) != len(labels):
            raise DataError("labels must form a contiguous range")

    @property
    def object_ids(self) -> np.ndarray:
        ids = np.unique(self.gaussian_labels)
        return ids[ids > 0]

    def mask_for(self, label: int) -> np.ndarray:
        return self.gaussian_labels == label


# ---------------------------------------------------------------------------
# PLY I/O (binary little-endian, 3DGS property layout)
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "<u1", "uint8": "<u1",
    "char": "<i1", "int8": "<i1",
    "short": "<i2", "ushort": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4",
}


def _read_ply_vertices(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header_end = raw.index(b"\n", end) + 1
    lines = raw[:header_end].decode("ascii", errors="replace").splitlines()

    count = None
    props = []
    in_vertex = False
    fmt_ok = False
    for line in lines:
        parts = line.strip().split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError(f"{path}: list properties unsupported")
            props.append((parts[2], _PLY_TYPES.get(parts[1])))
    if not fmt_ok:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    if count is None:
        raise FormatError(f"{path}: no vertex element")
    for name, dt in props:
        if dt is None:
            raise FormatError(f"{path}: unsupported property type for {name}")

    dtype = np.dtype([(name, dt) for name, dt in props])
    body = raw[header_end:header_end + count * dtype.itemsize]
    if len(body) != count * dtype.itemsize:
        raise FormatError(f"{path}: truncated vertex data")
    return np.frombuffer(body, dtype=dtype, count=count)


def load_ply(path, feature_dim: int = 32, seed: int = 0) -> GaussianCloud:
    """Load a 3DGS point cloud.

    Opacity logits pass through a sigmoid, log-scales through exp, and
    quaternions are renormalized. Features are not stored in scene PLYs;
    they are freshly initialized here (see the distillation init policy)
    and normally replaced by a trained sidecar.
    """
    vertices = _read_ply_vertices(path)
    names = set(vertices.dtype.names or ())
    for prop in PLY_PROPERTIES:
        if prop not in names:
            raise FormatError(f"{path}: missing property '{prop}'")
    extra_sh = sorted(n for n in names if n.startswith("f_rest_"))
    if extra_sh:
        log.warning("%s: ignoring %d higher-order SH properties", path, len(extra_sh))

    def cols(*keys):
        return np.stack([vertices[k].astype(np.float64) for k in keys], axis=1)

    raw = {
        "positions": cols("x", "y", "z"),
        "f_dc": cols("f_dc_0", "f_dc_1", "f_dc_2"),
        "opacity": vertices["opacity"].astype(np.float64),
        "log_scales": cols("scale_0", "scale_1", "scale_2"),
        "rotations": cols("rot_0", "rot_1", "rot_2", "rot_3"),
    }
    for name, arr in raw.items():
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.argwhere(bad)[0][0])
            raise DataError(f"{path}: non-finite {name} value at element {idx}")

    opacities = 1.0 / (1.0 + np.exp(-raw["opacity"]))
    # keep strictly inside (0,1) even for extreme stored logits
    opacities = np.clip(opacities, 1e-7, 1.0 - 1e-7)
    norms = np.linalg.norm(raw["rotations"], axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        idx = int(np.argmin(norms))
        raise DataError(f"{path}: zero quaternion at element {idx}")

    from .distill import init_features

    n = len(vertices)
    return GaussianCloud(
        positions=raw["positions"],
        scales=np.exp(raw["log_scales"]),
        rotations=raw["rotations"] / norms,
        opacities=opacities,
        colors=np.clip(raw["f_dc"] * SH_C0 + 0.5, 0.0, 1.0),
        features=init_features(n, feature_dim, np.random.default_rng(seed)),
    )


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write the cloud in the 3DGS PLY layout (features go to a sidecar)."""
    n = cloud.count
    header = io.StringIO()
    header.write("ply\nformat binary_little_endian 1.0\n")
    header.write(f"element vertex {n}\n")
    for prop in PLY_PROPERTIES:
        header.write(f"property float {prop}\n")
    header.write("end_header\n")

    eps = 1e-7
    opac = np.clip(cloud.opacities, eps, 1.0 - eps)
    data = np.empty(n, dtype=np.dtype([(p, "<f4") for p in PLY_PROPERTIES]))
    for i, axis in enumerate(("x", "y", "z")):
        data[axis] = cloud.positions[:, i]
    for i in range(3):
        data[f"f_dc_{i}"] = (cloud.colors[:, i] - 0.5) / SH_C0
        data[f"scale_{i}"] = np.log(cloud.scales[:, i])
    data["opacity"] = np.log(opac / (1.0 - opac))
    for i in range(4):
        data[f"rot_{i}"] = cloud.rotations[:, i]

    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        fh.write(data.tobytes())


def save_segmentation(cloud: GaussianCloud, membership: np.ndarray, path) -> None:
    """Save the selected subset as a standalone PLY, attributes preserved."""
    membership = np.asarray(membership, dtype=bool)
    if membership.shape != (cloud.count,):
        raise ValueError("membership length does not match cloud")
    if not membership.any():
        raise ValueError("refusing to export an empty segmentation")
    save_ply(cloud.subset(membership), path)


# ---------------------------------------------------------------------------
# Camera / label JSON
# ---------------------------------------------------------------------------

def _camera_to_dict(cam: Camera) -> dict:
    return {
        "id": cam.id,
        "width": cam.width,
        "height": cam.height,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "world_to_camera": [float(v) for v in cam.world_to_camera.reshape(-1)],
    }


def save_cameras(cameras, path) -> None:
    payload = [_camera_to_dict(c) for c in cameras]
    Path(path).write_text(json.dumps(payload, indent=2))


def load_cameras(path) -> list:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(payload, dict):
        version = payload.get("version")
        if version != CAMERA_SCHEMA_VERSION:
            raise FormatError(f"{path}: unknown camera schema version {version!r}")
        payload = payload.get("cameras", [])
    if not isinstance(payload, list):
        raise FormatError(f"{path}: expected a JSON array of cameras")
    cameras = []
    for i, entry in enumerate(payload):
        try:
            w2c = np.asarray(entry["world_to_camera"], dtype=np.float64)
            if w2c.size != 16:
                raise FormatError(
                    f"{path}: camera {i}: world_to_camera needs 16 floats"
                )
            cameras.append(Camera(
                width=int(entry["width"]), height=int(entry["height"]),
                fx=float(entry["fx"]), fy=float(entry["fy"]),
                cx=float(entry["cx"]), cy=float(entry["cy"]),
                world_to_camera=w2c.reshape(4, 4),
                id=str(entry.get("id", f"view{i}")),
            ))
        except KeyError as exc:
            raise FormatError(f"{path}: camera {i} missing field {exc}") from exc
    return cameras


def save_labels(labels: GroundTruthLabels, path) -> None:
    Path(path).write_text(json.dumps(
        {"gaussian_labels": [int(v) for v in labels.gaussian_labels]}
    ))


def load_labels(path) -> GroundTruthLabels:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict) or "gaussian_labels" not in payload:
        raise FormatError(f"{path}: expected {{'gaussian_labels': [...]}}")
    return GroundTruthLabels(np.asarray(payload["gaussian_labels"], dtype=np.int64))


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Recipe for a desk-scale oracle scene."""

    n_objects: int
    gaussians_per_object: int = 500
    separation: float = 6.0
    blob_radius: float = 1.0
    n_views: int = 12
    image_size: int = 64
    feature_dim: int = 32
    fov_deg: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.gaussians_per_object < 1:
            raise ValueError("gaussians_per_object must be >= 1")

    @staticmethod
    def from_json(path) -> "SynthSpec":
        payload = json.loads(Path(path).read_text())
        return SynthSpec(**payload)


def _blob_offsets(rng, count, semi_axes, radius):
    """Offsets on a jittered ellipsoid shell, contained inside `radius`.

    Real 3DGS reconstructions put Gaussians on object surfaces, so the
    oracle scenes do the same; a hollow shell also keeps every Gaussian
    visible from the camera ring, which solid blobs would not.
    """
    dirs = rng.normal(0.0, 1.0, size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radial = rng.uniform(0.85, 1.0, size=(count, 1))
    return dirs * semi_axes * radial


def _random_quaternions(rng, count):
    q = rng.normal(size=(count, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def synth_scene(spec: SynthSpec):
    """Generate (cloud, cameras, labels); bit-deterministic under the seed.

    Objects are Gaussian blobs centered on a ring so adjacent centers sit
    exactly `separation` apart; cameras circle the scene looking at its
    centroid.
    """
    rng = np.random.default_rng(spec.seed)
    L = spec.n_objects
    m = spec.gaussians_per_object

    if L == 1:
        centers = np.zeros((1, 3))
    else:
        ring_r = spec.separation / (2.0 * math.sin(math.pi / L))
        angles = 2.0 * math.pi * np.arange(L) / L
        centers = np.stack(
            [ring_r * np.cos(angles), ring_r * np.sin(angles), np.zeros(L)], axis=1
        )
        centers[:, 2] = rng.uniform(-0.2, 0.2, size=L) * spec.blob_radius

    positions = np.empty((L * m, 3))
    scales = np.empty((L * m, 3))
    colors = np.empty((L * m, 3))
    labels = np.empty(L * m, dtype=np.int64)
    base_hues = rng.permutation(L)
    for o in range(L):
        sl = slice(o * m, (o + 1) * m)
        semi_axes = spec.blob_radius * rng.uniform(0.7, 1.0, size=3)
        positions[sl] = centers[o] + _blob_offsets(rng, m, semi_axes, spec.blob_radius)
        scales[sl] = spec.blob_radius * rng.uniform(0.05, 0.11, size=(m, 3))
        hue = (base_hues[o] + 0.5) / L
        base = np.array([
            0.5 + 0.4 * math.cos(2 * math.pi * hue),
            0.5 + 0.4 * math.cos(2 * math.pi * (hue + 1.0 / 3.0)),
            0.5 + 0.4 * math.cos(2 * math.pi * (hue + 2.0 / 3.0)),
        ])
        colors[sl] = np.clip(base + rng.uniform(-0.05, 0.05, size=(m, 3)), 0.02, 0.98)
        labels[sl] = o + 1

    from .distill import init_features

    cloud = GaussianCloud(
        positions=positions,
        scales=scales,
        rotations=_random_quaternions(rng, L * m),
        opacities=rng.uniform(0.75, 0.95, size=L * m),
        colors=colors,
        features=init_features(L * m, spec.feature_dim, rng),
    )

    centroid = positions.mean(axis=0)
    scene_radius = float(np.max(np.linalg.norm(positions - centroid, axis=1)))
    # distance chosen so the scene fills ~80% of the half field of view
    cam_dist = max(scene_radius, spec.blob_radius) / math.tan(
        0.8 * math.radians(spec.fov_deg) / 2.0
    )
    cameras = []
    elevations = (0.55, 0.25, -0.55, -0.25)
    for v in range(spec.n_views):
        ang = 2.0 * math.pi * v / spec.n_views + math.pi / spec.n_views
        elev = elevations[v % len(elevations)]
        eye = centroid + cam_dist * np.array(
            [math.cos(ang) * math.cos(elev),
             math.sin(ang) * math.cos(elev),
             math.sin(elev)]
        )
        cameras.append(Camera.look_at(
            eye, centroid, spec.image_size, spec.image_size,
            fov_deg=spec.fov_deg, cam_id=f"view{v:02d}",
        ))

    return cloud, cameras, GroundTruthLabels(labels)
