"""Scene data model: splat parameters, activations, initialization.

A scene is a flat collection of anisotropic 3D Gaussians. Each splat stores
raw (unconstrained) parameters; rendering applies the activations from
``activated``: exp for scale, L2 normalization for the rotation quaternion,
sigmoid for opacity. Colors live as spherical-harmonic coefficients, the
16-channel identity encoding is blended linearly (no view dependence).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, logit

# zeroth-order SH basis constant; degree-0 color = SH_C0 * coeff + 0.5
SH_C0 = 0.28209479177387814

IDENTITY_DIM = 16

_PARAM_FIELDS = (
    "positions",
    "log_scales",
    "rotations",
    "opacity_logits",
    "sh",
    "identities",
)


def rgb_to_sh0(rgb):
    """Degree-0 SH coefficient reproducing ``rgb`` under the +0.5 shift."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh0_to_rgb(coeff):
    return np.asarray(coeff, dtype=np.float64) * SH_C0 + 0.5


def sh_basis_size(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class Gaussian:
    """Raw parameters of a single splat (value record, arrays are copies)."""

    position: np.ndarray      # (3,)
    log_scale: np.ndarray     # (3,)
    rotation: np.ndarray      # (4,) quaternion (w, x, y, z), not necessarily unit
    opacity_logit: float
    sh_color: np.ndarray      # ((degree+1)^2, 3)
    identity: np.ndarray      # (16,)


def activated(g: Gaussian):
    """Map raw parameters to rendering space: (scale, unit quaternion, opacity).

    scale = exp(log_scale) > 0, quaternion normalized to unit length,
    opacity = sigmoid(opacity_logit) in (0, 1). Raises on non-finite inputs
    and on a zero-length quaternion.
    """
    log_scale = np.asarray(g.log_scale, dtype=np.float64)
    rotation = np.asarray(g.rotation, dtype=np.float64)
    if not (np.isfinite(log_scale).all() and np.isfinite(rotation).all()
            and np.isfinite(g.opacity_logit)):
        raise ValueError("non-finite splat parameters")
    norm = float(np.linalg.norm(rotation))
    if norm == 0.0:
        raise ValueError("zero-length rotation quaternion")
    return np.exp(log_scale), rotation / norm, float(expit(g.opacity_logit))


def deactivated(scale, quaternion, opacity):
    """Inverse of ``activated`` on valid activated values."""
    scale = np.asarray(scale, dtype=np.float64)
    quaternion = np.asarray(quaternion, dtype=np.float64)
    if np.any(scale <= 0.0) or not (0.0 < opacity < 1.0):
        raise ValueError("values outside the activated range")
    return np.log(scale), quaternion / np.linalg.norm(quaternion), float(logit(opacity))


@dataclass
class Classifier:
    """Linear head mapping 16-dim identity features to group logits."""

    weights: np.ndarray  # (16, C)
    bias: np.ndarray     # (C,)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != IDENTITY_DIM:
            raise ValueError("classifier weights must have shape (16, C)")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError("classifier bias length must match channel count")

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    def logits(self, features):
        """features (..., 16) -> logits (..., C)."""
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def copy(self) -> "Classifier":
        return Classifier(self.weights.copy(), self.bias.copy())


@dataclass
class Scene:
    """Structure-of-arrays splat collection plus its identity classifier."""

    positions: np.ndarray       # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    rotations: np.ndarray       # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, (degree+1)^2, 3)
    identities: np.ndarray      # (N, 16)
    classifier: Classifier
    sh_degree: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in _PARAM_FIELDS:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = self.positions.shape[0]
        if n == 0:
            raise ValueError("scene must contain at least one splat")
        basis = sh_basis_size(self.sh_degree)
        shapes = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "sh": (n, basis, 3),
            "identities": (n, IDENTITY_DIM),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValueError(f"scene field {name} has shape {got}, expected {want}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        """Copy of splat ``i`` as a value record."""
        return Gaussian(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_color=self.sh[i].copy(),
            identity=self.identities[i].copy(),
        )

    def copy(self) -> "Scene":
        return Scene(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh=self.sh.copy(),
            identities=self.identities.copy(),
            classifier=self.classifier.copy(),
            sh_degree=self.sh_degree,
            metadata=dict(self.metadata),
        )

    def take(self, indices) -> "Scene":
        """Sub-scene with the given splat rows (classifier shared by copy)."""
        indices = np.asarray(indices)
        return Scene(
            positions=self.positions[indices],
            log_scales=self.log_scales[indices],
            rotations=self.rotations[indices],
            opacity_logits=self.opacity_logits[indices],
            sh=self.sh[indices],
            identities=self.identities[indices],
            classifier=self.classifier.copy(),
            sh_degree=self.sh_degree,
            metadata=dict(self.metadata),
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. world_to_camera maps world points into a frame with
    x right, y down, z forward; pixel centers sit at integer + 0.5."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4) row-major rigid transform
    near: float = 0.01
    far: float = 1.0e6

    def __post_init__(self):
        w2c = np.ascontiguousarray(self.world_to_camera, dtype=np.float64)
        object.__setattr__(self, "world_to_camera", w2c)
        if w2c.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        r = w2c[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1.0e-6):
            raise ValueError("world_to_camera rotation block is not orthonormal")
        if not np.allclose(w2c[3], (0.0, 0.0, 0.0, 1.0), atol=1.0e-12):
            raise ValueError("world_to_camera last row must be (0, 0, 0, 1)")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image must have positive size")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class InitConfig:
    sh_degree: int = 3
    channels: int = 256          # classifier output channels
    init_opacity: float = 0.1
    identity_std: float = 0.01
    scale_neighbors: int = 3     # neighbor count for the initial scale heuristic
    fallback_scale: float = 0.1  # used when a point has no neighbors


def _mean_neighbor_distance(points: np.ndarray, k: int, fallback: float) -> np.ndarray:
    """Mean Euclidean distance from each point to its k nearest others."""
    n = points.shape[0]
    k = min(k, n - 1)
    if k <= 0:
        return np.full(n, fallback, dtype=np.float64)
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=k + 1)  # first column is the point itself
    mean = dist[:, 1:].mean(axis=1)
    return np.maximum(mean, 1.0e-7)


def init_scene(points, colors, config: InitConfig | None = None, seed: int = 0) -> Scene:
    """Build a trainable scene from a colored point cloud.

    Per point: position as given, isotropic log-scale from the mean distance
    to the 3 nearest points, identity quaternion, opacity logit(init_opacity),
    degree-0 SH from the color (higher orders zero), identity encoding drawn
    from N(0, identity_std^2). The classifier weights are N(0, 1/sqrt(16))
    with zero bias. All randomness comes from ``seed``.
    """
    config = config or InitConfig()
    points = np.ascontiguousarray(points, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValueError("empty initialization: need a non-empty (N, 3) point array")
    if colors.shape != points.shape:
        raise ValueError("colors must be (N, 3) matching points")

    n = points.shape[0]
    basis = sh_basis_size(config.sh_degree)
    sh = np.zeros((n, basis, 3), dtype=np.float64)
    sh[:, 0, :] = rgb_to_sh0(colors)

    scale = _mean_neighbor_distance(points, config.scale_neighbors, config.fallback_scale)
    log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)

    rotations = np.zeros((n, 4), dtype=np.float64)
    rotations[:, 0] = 1.0

    rng = np.random.default_rng(seed)
    identities = rng.normal(0.0, config.identity_std, size=(n, IDENTITY_DIM))
    weights = rng.normal(0.0, 1.0 / np.sqrt(IDENTITY_DIM), size=(IDENTITY_DIM, config.channels))
    classifier = Classifier(weights=weights, bias=np.zeros(config.channels))

    return Scene(
        positions=points.copy(),
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=np.full(n, logit(config.init_opacity), dtype=np.float64),
        sh=sh,
        identities=identities,
        classifier=classifier,
        sh_degree=config.sh_degree,
        metadata={"seed": seed, "init_opacity": config.init_opacity},
    )
