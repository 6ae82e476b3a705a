"""Project 3D splats into screen space.

3D covariance is R(q) diag(s^2) R(q)^T. The 2D covariance follows the local
affine approximation of the perspective map: cov2d = A cov3d A^T with
A = J R_cam, J the 2x3 Jacobian of (fx x/z + cx, fy y/z + cy). A 0.3 px^2
low-pass dilation is added to both screen-space variances so every splat
covers at least a pixel; the conic is the inverse of the dilated covariance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .scene import Camera, Gaussian, Scene
from . import sh as shlib

COV2D_DILATION = 0.3
ALPHA_SKIP = 1.0 / 255.0   # contributions below this are dropped
ALPHA_CLAMP = 0.99         # per-splat alpha ceiling
STOP_TRANSMITTANCE = 1.0e-4
FRUSTUM_GUARD = 1.3        # keep splats within a 1.3x-scaled image rectangle


def normalize_quaternions(q: np.ndarray):
    """(N, 4) -> (unit quaternions, norms)."""
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-length rotation quaternion")
    return q / norms[:, None], norms


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) (w, x, y, z) -> rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    r = np.empty((n, 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[:, 0, 1] = 2.0 * (x * y - w * z)
    r[:, 0, 2] = 2.0 * (x * z + w * y)
    r[:, 1, 0] = 2.0 * (x * y + w * z)
    r[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[:, 1, 2] = 2.0 * (y * z - w * x)
    r[:, 2, 0] = 2.0 * (x * z - w * y)
    r[:, 2, 1] = 2.0 * (y * z + w * x)
    r[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def quat_rotmat_grad(q: np.ndarray) -> np.ndarray:
    """d(rotmat)/d(unit quaternion): (N, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    g = np.zeros((n, 4, 3, 3), dtype=np.float64)
    zeros = np.zeros(n)
    g[:, 0] = 2.0 * np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1),
    ], axis=-2)
    g[:, 1] = 2.0 * np.stack([
        np.stack([zeros, y, z], axis=-1),
        np.stack([y, -2.0 * x, -w], axis=-1),
        np.stack([z, w, -2.0 * x], axis=-1),
    ], axis=-2)
    g[:, 2] = 2.0 * np.stack([
        np.stack([-2.0 * y, x, w], axis=-1),
        np.stack([x, zeros, z], axis=-1),
        np.stack([-w, z, -2.0 * y], axis=-1),
    ], axis=-2)
    g[:, 3] = 2.0 * np.stack([
        np.stack([-2.0 * z, -w, x], axis=-1),
        np.stack([w, -2.0 * z, y], axis=-1),
        np.stack([x, y, zeros], axis=-1),
    ], axis=-2)
    return g


def build_cov3d_batch(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """(N, 3) log scales + (N, 4) raw quaternions -> (N, 3, 3) covariances."""
    unit, _ = normalize_quaternions(rotations)
    rot = quat_to_rotmat(unit)
    m = rot * np.exp(log_scales)[:, None, :]  # columns scaled: M = R diag(s)
    return m @ np.swapaxes(m, 1, 2)


def build_cov3d(log_scale, rotation) -> np.ndarray:
    """Single-splat 3D covariance, symmetric positive definite."""
    return build_cov3d_batch(
        np.asarray(log_scale, dtype=np.float64)[None, :],
        np.asarray(rotation, dtype=np.float64)[None, :],
    )[0]


@dataclass
class Projected2D:
    """Screen-space footprint of one surviving splat."""

    gaussian_index: int
    mean2d: np.ndarray   # (2,) pixel coordinates
    cov2d: np.ndarray    # (2, 2) dilated screen-space covariance
    conic: np.ndarray    # (3,) inverse covariance (a, b, c)
    depth: float         # camera-frame z
    radius: int          # ceil(3 sigma_max), >= 1


@dataclass
class Projection:
    """Vectorized projection of every surviving splat of a scene.

    Arrays are ordered by ascending depth (ties by gaussian index); this is
    exactly the per-pixel blending order.
    """

    gaussian_index: np.ndarray  # (M,) int
    mean2d: np.ndarray          # (M, 2)
    cov2d: np.ndarray           # (M, 3) dilated (a, b, c)
    conic: np.ndarray           # (M, 3)
    depth: np.ndarray           # (M,)
    radius: np.ndarray          # (M,) int
    opacity: np.ndarray         # (M,) activated sigmoid opacity
    color: np.ndarray           # (M, 3) clamped SH color
    color_clamped: np.ndarray   # (M, 3) bool, channels pinned at zero
    identity: np.ndarray        # (M, 16)

    def __len__(self) -> int:
        return self.gaussian_index.shape[0]


def _guard_band_keep(mean2d: np.ndarray, width: int, height: int) -> np.ndarray:
    """True for means inside the image rectangle scaled by FRUSTUM_GUARD."""
    half_w = 0.5 * width * FRUSTUM_GUARD
    half_h = 0.5 * height * FRUSTUM_GUARD
    cx, cy = 0.5 * width, 0.5 * height
    return (
        (np.abs(mean2d[:, 0] - cx) <= half_w)
        & (np.abs(mean2d[:, 1] - cy) <= half_h)
    )


def perspective_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """(N, 3) camera-frame points -> (N, 2, 3) Jacobian of pixel projection."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    n = p_cam.shape[0]
    j = np.zeros((n, 2, 3), dtype=np.float64)
    j[:, 0, 0] = fx / z
    j[:, 0, 2] = -fx * x / (z * z)
    j[:, 1, 1] = fy / z
    j[:, 1, 2] = -fy * y / (z * z)
    return j


def project_scene(scene: Scene, camera: Camera) -> Projection:
    """Project all splats, cull, and depth-sort the survivors."""
    r_wc = camera.rotation
    p_cam = scene.positions @ r_wc.T + camera.translation
    z = p_cam[:, 2]

    mean2d = np.empty((len(scene), 2), dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean2d[:, 0] = camera.fx * p_cam[:, 0] / z + camera.cx
        mean2d[:, 1] = camera.fy * p_cam[:, 1] / z + camera.cy

    keep = (z > camera.near) & (z < camera.far)
    keep &= _guard_band_keep(np.nan_to_num(mean2d, nan=np.inf, posinf=np.inf, neginf=-np.inf),
                             camera.width, camera.height)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return Projection(*(np.empty((0,) + s, dtype=d) for s, d in (
            ((), np.int64), ((2,), np.float64), ((3,), np.float64), ((3,), np.float64),
            ((), np.float64), ((), np.int64), ((), np.float64), ((3,), np.float64),
            ((3,), np.bool_), ((16,), np.float64))))

    p_cam = p_cam[idx]
    mean2d = mean2d[idx]
    depth = z[idx]

    cov3d = build_cov3d_batch(scene.log_scales[idx], scene.rotations[idx])
    j = perspective_jacobian(p_cam, camera.fx, camera.fy)
    a_mat = j @ r_wc                                     # (M, 2, 3)
    cov2d_full = a_mat @ cov3d @ np.swapaxes(a_mat, 1, 2)
    a = cov2d_full[:, 0, 0] + COV2D_DILATION
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + COV2D_DILATION
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.maximum(np.ceil(3.0 * np.sqrt(lam_max)), 1.0).astype(np.int64)

    dirs = scene.positions[idx] - camera.center
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    color, clamped = shlib.eval_color(scene.sh_degree, scene.sh[idx], dirs)

    from scipy.special import expit
    opacity = expit(scene.opacity_logits[idx])

    order = np.lexsort((idx, depth))  # ascending depth, ties by splat index
    return Projection(
        gaussian_index=idx[order].astype(np.int64),
        mean2d=np.ascontiguousarray(mean2d[order]),
        cov2d=np.ascontiguousarray(np.stack([a, b, c], axis=1)[order]),
        conic=np.ascontiguousarray(conic[order]),
        depth=np.ascontiguousarray(depth[order]),
        radius=np.ascontiguousarray(radius[order]),
        opacity=np.ascontiguousarray(opacity[order]),
        color=np.ascontiguousarray(color[order]),
        color_clamped=np.ascontiguousarray(clamped[order]),
        identity=np.ascontiguousarray(scene.identities[idx][order]),
    )


def project_gaussian(g: Gaussian, camera: Camera,
                     gaussian_index: int = 0) -> Optional[Projected2D]:
    """Project a single splat; returns None when culled.

    Culling: camera-frame z outside (near, far), or the projected mean beyond
    a FRUSTUM_GUARD x-scaled image rectangle (splats just off-screen whose
    footprint still touches the image survive).
    """
    p_cam = camera.rotation @ np.asarray(g.position, dtype=np.float64) + camera.translation
    z = float(p_cam[2])
    if z <= camera.near or z >= camera.far:
        return None
    mean2d = np.array([
        camera.fx * p_cam[0] / z + camera.cx,
        camera.fy * p_cam[1] / z + camera.cy,
    ])
    if not _guard_band_keep(mean2d[None, :], camera.width, camera.height)[0]:
        return None

    cov3d = build_cov3d(g.log_scale, g.rotation)
    j = perspective_jacobian(p_cam[None, :], camera.fx, camera.fy)[0]
    a_mat = j @ camera.rotation
    cov2d = a_mat @ cov3d @ a_mat.T
    cov2d[0, 0] += COV2D_DILATION
    cov2d[1, 1] += COV2D_DILATION
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    det = a * c - b * b
    conic = np.array([c / det, -b / det, a / det])
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = int(max(np.ceil(3.0 * np.sqrt(lam_max)), 1.0))
    return Projected2D(
        gaussian_index=gaussian_index,
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        depth=z,
        radius=radius,
    )


def cull_and_sort(projected: Sequence[Projected2D]) -> list[int]:
    """Blend order for a list of footprints: ascending depth, ties by
    ascending gaussian_index. Returns the gaussian indices in that order."""
    if len(projected) == 0:
        return []
    depth = np.array([p.depth for p in projected])
    gidx = np.array([p.gaussian_index for p in projected])
    order = np.lexsort((gidx, depth))
    return [int(gidx[i]) for i in order]
