"""Synthetic scene generator with exact ground truth.

Builds splat scenes whose group structure is known by construction: colored
blobs on a ring, and a nested-shell arrangement (an opaque shell with fully
occluded interior splats plus a large backdrop) for occlusion experiments.
The generator renders the scene itself, so images, id masks, camera poses,
and per-splat group labels are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logit

from .rasterizer import render_forward
from .scene import Camera, Classifier, Scene, rgb_to_sh0

DEFAULT_PALETTE = (
    (0.85, 0.15, 0.15),
    (0.15, 0.65, 0.20),
    (0.20, 0.25, 0.85),
    (0.85, 0.75, 0.15),
    (0.70, 0.20, 0.75),
    (0.15, 0.75, 0.75),
)


def look_at_camera(eye, target, width, height, focal,
                   up=(0.0, 0.0, 1.0), near=0.01, far=1.0e6) -> Camera:
    """Camera at ``eye`` looking at ``target``; image up follows world ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z_c = target - eye
    z_c = z_c / np.linalg.norm(z_c)
    x_c = np.cross(z_c, up)
    nx = np.linalg.norm(x_c)
    if nx < 1.0e-9:  # looking along up: pick any orthogonal right vector
        x_c = np.cross(z_c, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x_c)
    x_c = x_c / nx
    y_c = np.cross(z_c, x_c)
    rot = np.stack([x_c, y_c, z_c])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ eye
    return Camera(width=width, height=height, fx=focal, fy=focal,
                  cx=width / 2.0, cy=height / 2.0, world_to_camera=w2c,
                  near=near, far=far)


def ring_cameras(count, radius, height, width_px, height_px, focal,
                 target=(0.0, 0.0, 0.0), azimuth_offset=0.0) -> list[Camera]:
    cams = []
    for i in range(count):
        theta = 2.0 * np.pi * i / count + azimuth_offset
        eye = (radius * np.cos(theta), radius * np.sin(theta), height)
        cams.append(look_at_camera(eye, target, width_px, height_px, focal))
    return cams


def _identity_classifier(channels: int) -> Classifier:
    weights = np.zeros((16, channels))
    weights[:, :16] = np.eye(16)
    return Classifier(weights=weights, bias=np.zeros(channels))


@dataclass
class BlobSceneSpec:
    n_blobs: int = 3
    per_blob: int = 120
    layout_radius: float = 1.2
    blob_std: float = 0.22
    splat_scale: float = 0.07
    opacity: float = 0.95
    colors: tuple = DEFAULT_PALETTE
    # enclosing dome (its own group) so every camera ray terminates in
    # labeled geometry; without it, pixels outside the blobs are unlabeled
    # and unsupervised
    dome_points: int = 900
    dome_radius: float = 6.0
    dome_overlap: float = 1.9      # point spacing / splat sigma
    dome_color: tuple = (0.32, 0.36, 0.46)
    n_cameras: int = 12            # training ring
    test_cameras: int = 4          # held-out ring, offset in azimuth + height
    camera_radius: float = 4.0
    camera_height: float = 1.6
    test_height: float = 1.85
    test_azimuth_offset: float = np.pi / 12.0   # 15 degrees
    image_size: int = 64
    focal: float = 70.0
    channels: int = 256


@dataclass
class ShellSceneSpec:
    """Opaque shell (group 1) with occluded interior splats, over a large
    backdrop plane (group 2)."""

    # two concentric layers of overlapping near-opaque splats: transmittance
    # must drop below the rasterizer's early-stop before any ray reaches the
    # interior, so the interior receives exactly zero image-space gradient
    shell_points: int = 900          # per layer
    shell_radii: tuple = (0.76, 0.84)
    shell_scale: float = 0.10
    # the interior filling must stay occluded (its splats' 3-sigma footprints
    # project inside the shell silhouette from every ring camera) yet reach
    # close enough to the shell that the splat k-nearest-neighbor graph
    # connects interior to shell -- otherwise no spatial loss could ever
    # propagate the shell's label inward
    interior_points: int = 240
    interior_radius: float = 0.62
    interior_scale: float = 0.04
    backdrop_side: int = 26          # backdrop is side x side splats
    backdrop_z: float = -1.6         # plane height (world z)
    backdrop_extent: float = 5.0
    splat_opacity: float = 0.998
    shell_color: tuple = (0.85, 0.3, 0.2)
    interior_color: tuple = (0.8, 0.65, 0.3)
    backdrop_color: tuple = (0.25, 0.35, 0.6)
    n_cameras: int = 12
    camera_radius: float = 4.0
    camera_height: float = 2.2
    image_size: int = 48
    focal: float = 52.0
    channels: int = 256


@dataclass
class SynthResult:
    scene: Scene                 # exact generating scene
    cameras: list                # training cameras followed by held-out ones
    images: list                 # (H, W, 3) float arrays
    masks: list                  # (H, W) uint16 id maps, 0 = background
    group_ids: np.ndarray        # (N,) true group per splat, 1-based
    points: np.ndarray           # (N, 3) initialization point cloud
    point_colors: np.ndarray     # (N, 3) in [0, 1]
    point_group_ids: np.ndarray  # (N,) true group per init point
    n_train: int = 0             # cameras[:n_train] are the training views
    spec: object = None


def render_id_mask(scene: Scene, camera: Camera, n_groups: int) -> np.ndarray:
    """Exact id mask: argmax over blended one-hot identity channels wherever
    accumulated alpha exceeds 0.5, else 0."""
    out = render_forward(scene, camera)
    alpha = 1.0 - out.final_transmittance
    label = np.argmax(out.identity_image[:, :, :n_groups], axis=2).astype(np.uint16) + 1
    label[alpha <= 0.5] = 0
    return label


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([np.sin(phi) * np.cos(theta),
                     np.sin(phi) * np.sin(theta),
                     np.cos(phi)], axis=1)


def make_blob_dataset(spec: BlobSceneSpec | None = None, seed: int = 0) -> SynthResult:
    """Colored blobs on a ring inside an enclosing dome; every blob is one
    group and the dome is group ``n_blobs + 1``."""
    spec = spec or BlobSceneSpec()
    if spec.n_blobs + 1 > 16:
        raise ValueError("one-hot identity supports at most 15 blobs plus the dome")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    positions = []
    group_ids = []
    colors = []
    scales = []
    for b in range(spec.n_blobs):
        theta = 2.0 * np.pi * b / spec.n_blobs
        center = np.array([spec.layout_radius * np.cos(theta),
                           spec.layout_radius * np.sin(theta),
                           0.25 * np.sin(3.0 * theta)])
        offsets = rng.normal(0.0, spec.blob_std, (spec.per_blob, 3))
        # pull radial outliers back to 2 sigma so every blob renders as one
        # cohesive silhouette with no detached satellite splats
        radii = np.linalg.norm(offsets, axis=1, keepdims=True)
        cap = 2.0 * spec.blob_std
        offsets *= np.minimum(1.0, cap / np.maximum(radii, 1e-12))
        positions.append(center + offsets)
        group_ids.append(np.full(spec.per_blob, b + 1, dtype=np.int64))
        colors.append(np.tile(spec.colors[b % len(spec.colors)], (spec.per_blob, 1)))
        scales.append(np.full(spec.per_blob, spec.splat_scale))
    dome = spec.dome_radius * _fibonacci_sphere(spec.dome_points)
    dome_sigma = spec.dome_radius * np.sqrt(4.0 * np.pi / spec.dome_points) / spec.dome_overlap
    positions.append(dome)
    group_ids.append(np.full(spec.dome_points, spec.n_blobs + 1, dtype=np.int64))
    colors.append(np.tile(spec.dome_color, (spec.dome_points, 1)))
    scales.append(np.full(spec.dome_points, dome_sigma))
    positions = np.concatenate(positions)
    group_ids = np.concatenate(group_ids)
    colors = np.concatenate(colors)
    scales = np.concatenate(scales)

    n = positions.shape[0]
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    identities = np.zeros((n, 16))
    identities[np.arange(n), group_ids - 1] = 1.0
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    scene = Scene(
        positions=positions,
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, float(logit(spec.opacity))),
        sh=sh,
        identities=identities,
        classifier=_identity_classifier(spec.channels),
        sh_degree=0,
    )
    cameras = ring_cameras(spec.n_cameras, spec.camera_radius, spec.camera_height,
                           spec.image_size, spec.image_size, spec.focal)
    cameras += ring_cameras(spec.test_cameras, spec.camera_radius, spec.test_height,
                            spec.image_size, spec.image_size, spec.focal,
                            azimuth_offset=spec.test_azimuth_offset)
    images = [render_forward(scene, cam).color for cam in cameras]
    masks = [render_id_mask(scene, cam, spec.n_blobs + 1) for cam in cameras]

    jitter = rng.normal(0.0, 0.01, positions.shape)
    return SynthResult(
        scene=scene, cameras=cameras, images=images, masks=masks,
        group_ids=group_ids, points=positions + jitter, point_colors=colors,
        point_group_ids=group_ids.copy(), n_train=spec.n_cameras, spec=spec,
    )


def make_shell_dataset(spec: ShellSceneSpec | None = None, seed: int = 0) -> SynthResult:
    """Opaque shell with fully occluded interior splats over a backdrop.

    Interior splats share the shell's group id (they belong to the same
    object) but are invisible from every camera; no image-space supervision
    ever reaches them.
    """
    spec = spec or ShellSceneSpec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    shell = np.concatenate([r * _fibonacci_sphere(spec.shell_points)
                            for r in spec.shell_radii])
    interior_dirs = rng.normal(0.0, 1.0, (spec.interior_points, 3))
    interior_dirs /= np.linalg.norm(interior_dirs, axis=1, keepdims=True)
    interior_r = spec.interior_radius * rng.uniform(0.0, 1.0, spec.interior_points) ** (1 / 3)
    interior = interior_dirs * interior_r[:, None]

    side = spec.backdrop_side
    g = np.linspace(-spec.backdrop_extent, spec.backdrop_extent, side)
    gx, gy = np.meshgrid(g, g)
    backdrop = np.stack([gx.ravel(), gy.ravel(),
                         np.full(side * side, spec.backdrop_z)], axis=1)

    positions = np.concatenate([shell, interior, backdrop])
    group_ids = np.concatenate([
        np.full(shell.shape[0], 1, dtype=np.int64),
        np.full(interior.shape[0], 1, dtype=np.int64),
        np.full(backdrop.shape[0], 2, dtype=np.int64),
    ])
    colors = np.concatenate([
        np.tile(spec.shell_color, (shell.shape[0], 1)),
        np.tile(spec.interior_color, (interior.shape[0], 1)),
        np.tile(spec.backdrop_color, (backdrop.shape[0], 1)),
    ])
    scales = np.concatenate([
        np.full(shell.shape[0], spec.shell_scale),
        np.full(interior.shape[0], spec.interior_scale),
        np.full(backdrop.shape[0], 2.0 * spec.backdrop_extent / side),
    ])

    n = positions.shape[0]
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = rgb_to_sh0(colors)
    identities = np.zeros((n, 16))
    identities[np.arange(n), group_ids - 1] = 1.0
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    scene = Scene(
        positions=positions,
        log_scales=np.log(scales)[:, None].repeat(3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, float(logit(spec.splat_opacity))),
        sh=sh,
        identities=identities,
        classifier=_identity_classifier(spec.channels),
        sh_degree=0,
    )
    cameras = ring_cameras(spec.n_cameras, spec.camera_radius, spec.camera_height,
                           spec.image_size, spec.image_size, spec.focal)
    images = [render_forward(scene, cam).color for cam in cameras]
    masks = [render_id_mask(scene, cam, 2) for cam in cameras]
    jitter = rng.normal(0.0, 0.008, positions.shape)
    return SynthResult(
        scene=scene, cameras=cameras, images=images, masks=masks,
        group_ids=group_ids, points=positions + jitter, point_colors=colors,
        point_group_ids=group_ids.copy(), n_train=len(cameras), spec=spec,
    )


def shuffle_mask_labels(masks: list[np.ndarray], seed: int = 0) -> list[np.ndarray]:
    """Re-label each view's mask with arbitrary per-view local ids (keeping 0),
    simulating an unassociated instance segmentation."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    out = []
    for mask in masks:
        ids = np.unique(mask)
        ids = ids[ids > 0]
        perm = rng.permutation(ids.size) + 1
        remap = np.zeros(int(mask.max()) + 1, dtype=mask.dtype)
        for src, dst in zip(ids, perm):
            remap[src] = dst
        out.append(remap[mask])
    return out
