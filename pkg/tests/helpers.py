"""Shared builders and independent oracles used across the test modules."""

from __future__ import annotations

import numpy as np

from groupsplat.projection import (
    ALPHA_CLAMP,
    ALPHA_SKIP,
    STOP_TRANSMITTANCE,
    project_scene,
)
from groupsplat.scene import Camera, Classifier, Scene, rgb_to_sh0, sh_basis_size


def front_camera(size: int = 16, fx: float = 24.0, fy: float = 24.0,
                 cx: float | None = None, cy: float | None = None,
                 distance: float = 4.0, width: int | None = None,
                 height: int | None = None) -> Camera:
    """Axis-aligned camera at world z = -distance looking toward +z."""
    width = size if width is None else width
    height = size if height is None else height
    w2c = np.eye(4)
    w2c[2, 3] = distance
    return Camera(
        width=width, height=height, fx=fx, fy=fy,
        cx=0.5 * width if cx is None else cx,
        cy=0.5 * height if cy is None else cy,
        world_to_camera=w2c,
    )


def eye_classifier(channels: int = 16) -> Classifier:
    """Channel c fires exactly on identity coordinate c (c < 16)."""
    weights = np.zeros((16, channels))
    weights[:, :16] = np.eye(16)[:, : min(16, channels)]
    return Classifier(weights=weights, bias=np.zeros(channels))


def simple_scene(positions, colors=None, scale: float = 0.3,
                 opacity_logit: float = 4.0, identities=None,
                 channels: int = 16, sh_degree: int = 0,
                 classifier: Classifier | None = None,
                 depth_jitter=None) -> Scene:
    """Isotropic splats with flat colors; identity rotation quaternions."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = positions.shape[0]
    if colors is None:
        colors = np.full((n, 3), 0.6)
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    sh = np.zeros((n, sh_basis_size(sh_degree), 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    if identities is None:
        identities = np.zeros((n, 16))
        identities[:, 0] = 1.0
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return Scene(
        positions=positions,
        log_scales=np.full((n, 3), np.log(scale)),
        rotations=rotations,
        opacity_logits=np.full(n, float(opacity_logit)),
        sh=sh,
        identities=np.asarray(identities, dtype=np.float64),
        classifier=classifier or eye_classifier(channels),
        sh_degree=sh_degree,
    )


def naive_render(scene: Scene, camera: Camera, background=(0.0, 0.0, 0.0)):
    """Sequential per-pixel compositing oracle.

    Walks the depth-ordered footprints one pixel at a time with plain Python
    loops: accept a splat when the pixel center lies in its radius box and
    its raw alpha passes the 1/255 floor, clamp alpha at 0.99, blend
    front-to-back, and stop once transmittance drops below 1e-4. Returns
    (color, identity, transmittance) arrays.
    """
    proj = project_scene(scene, camera)
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    identity = np.zeros((h, w, 16))
    t_final = np.ones((h, w))
    background = np.asarray(background, dtype=np.float64)
    for py in range(h):
        for px in range(w):
            cxp, cyp = px + 0.5, py + 0.5
            t = 1.0
            for row in range(len(proj)):
                ux, uy = proj.mean2d[row]
                r = float(proj.radius[row])
                if abs(cxp - ux) > r or abs(cyp - uy) > r:
                    continue
                dx, dy = cxp - ux, cyp - uy
                a, b, c = proj.conic[row]
                alpha = proj.opacity[row] * np.exp(
                    -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
                if alpha < ALPHA_SKIP:
                    continue
                alpha = min(alpha, ALPHA_CLAMP)
                if t < STOP_TRANSMITTANCE:
                    break
                color[py, px] += proj.color[row] * alpha * t
                identity[py, px] += proj.identity[row] * alpha * t
                t *= 1.0 - alpha
            t_final[py, px] = t
            color[py, px] += background * t
    return color, identity, t_final


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Bitwise equality of every per-splat array and the classifier."""
    return (np.array_equal(a.positions, b.positions)
            and np.array_equal(a.log_scales, b.log_scales)
            and np.array_equal(a.rotations, b.rotations)
            and np.array_equal(a.opacity_logits, b.opacity_logits)
            and np.array_equal(a.sh, b.sh)
            and np.array_equal(a.identities, b.identities)
            and np.array_equal(a.classifier.weights, b.classifier.weights)
            and np.array_equal(a.classifier.bias, b.classifier.bias))
