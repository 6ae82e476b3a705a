"""Group-level scene editing.

Groups are classifier channels: splat i belongs to group ``argmax(W·e_i + b)``
(0-based). Editing operations classify once, then transform only the selected
splats, leaving every other parameter bit-identical. All edits except
fine-tuning are training-free single passes over the scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.special import softmax

from .losses import DSSIM_WEIGHT, L1_WEIGHT, _ssim_core, reconstruction_loss
from .rasterizer import render_backward, render_forward
from .scene import InitConfig, Scene, init_scene, rgb_to_sh0
from .trainer import (ADAM_EPS_GEOMETRY, ADAM_EPS_IDENTITY, AdamState,
                      TrainConfig, adam_step, position_lr)

UNFREEZABLE = ("position", "scale", "rotation", "opacity", "sh", "identity")

_PARAM_OF = {
    "position": "positions",
    "scale": "log_scales",
    "rotation": "rotations",
    "opacity": "opacity_logits",
    "sh": "sh",
    "identity": "identities",
}

_EPS_OF = {
    "positions": ADAM_EPS_GEOMETRY,
    "log_scales": ADAM_EPS_GEOMETRY,
    "rotations": ADAM_EPS_GEOMETRY,
    "opacity_logits": ADAM_EPS_GEOMETRY,
    "sh": ADAM_EPS_GEOMETRY,
    "identities": ADAM_EPS_IDENTITY,
}


@dataclass
class GroupLabels:
    labels: np.ndarray       # (N,) int, 0-based classifier channel
    confidence: np.ndarray   # (N,) max softmax probability

    def __post_init__(self):
        if self.labels.shape != self.confidence.shape or self.labels.ndim != 1:
            raise ValueError("labels and confidence must be matching 1-D arrays")


def classify_gaussians(scene: Scene) -> GroupLabels:
    """Per-splat argmax group label (ties -> smallest channel)."""
    logits = scene.classifier.logits(scene.identities)
    labels = np.argmax(logits, axis=1)
    confidence = softmax(logits, axis=1)[np.arange(len(scene)), labels]
    return GroupLabels(labels=labels, confidence=confidence)


def _hull_interior(positions: np.ndarray, hull_points: np.ndarray,
                   tol: float = 1.0e-9) -> np.ndarray:
    """Boolean mask of ``positions`` inside the convex hull of ``hull_points``.
    Degenerate hulls (coplanar or fewer than 4 points) add nothing."""
    if hull_points.shape[0] < 4:
        return np.zeros(positions.shape[0], dtype=bool)
    try:
        hull = ConvexHull(hull_points)
    except QhullError:
        return np.zeros(positions.shape[0], dtype=bool)
    # facet half-spaces: normal . x + offset <= 0 inside
    planes = hull.equations
    values = positions @ planes[:, :3].T + planes[None, :, 3]
    return np.all(values <= tol, axis=1)


def select_group(scene: Scene, labels: GroupLabels, group_id: int,
                 convex_hull: bool = False) -> np.ndarray:
    """Indices of splats labeled ``group_id``; with ``convex_hull``, also any
    splat whose position lies inside the 3D convex hull of the labeled ones."""
    member = labels.labels == group_id
    if not member.any():
        raise ValueError("group id not present")
    if convex_hull:
        inside = _hull_interior(scene.positions, scene.positions[member])
        member = member | inside
    return np.flatnonzero(member)


def remove_group(scene: Scene, group_id: int, convex_hull: bool = False) -> Scene:
    """Delete the selected group; classifier and all other splats unchanged."""
    selected = select_group(scene, classify_gaussians(scene), group_id, convex_hull)
    keep = np.ones(len(scene), dtype=bool)
    keep[selected] = False
    return scene.take(np.flatnonzero(keep))


def recompose_swap(scene: Scene, group_a: int, group_b: int) -> Scene:
    """Exchange two groups' locations by translating each group rigidly onto
    the other's centroid. No other parameter changes."""
    labels = classify_gaussians(scene)
    idx_a = select_group(scene, labels, group_a)
    idx_b = select_group(scene, labels, group_b)
    out = scene.copy()
    if group_a == group_b:
        return out
    centroid_a = scene.positions[idx_a].mean(axis=0)
    centroid_b = scene.positions[idx_b].mean(axis=0)
    out.positions[idx_a] += centroid_b - centroid_a
    out.positions[idx_b] += centroid_a - centroid_b
    return out


def recolor_group(scene: Scene, group_id: int, color) -> Scene:
    """Training-free recolor: set the group's base color, zero the
    view-dependent terms."""
    color = np.asarray(color, dtype=np.float64)
    if color.shape != (3,):
        raise ValueError("color must be an RGB triple")
    selected = select_group(scene, classify_gaussians(scene), group_id)
    out = scene.copy()
    out.sh[selected, 0, :] = rgb_to_sh0(color)
    out.sh[selected, 1:, :] = 0.0
    return out


@dataclass
class FinetuneTarget:
    camera: object
    image: np.ndarray                         # (H, W, 3) target in [0, 1]
    region_mask: Optional[np.ndarray] = None  # (H, W) bool-ish edited region


def _region_bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return ys.min(), ys.max() + 1, xs.min(), xs.max() + 1


def _masked_loss(render: np.ndarray, target: FinetuneTarget):
    """0.8 * L1 outside the region mask + 0.2 * D-SSIM inside the region's
    bounding box; plain reconstruction loss when no region is given.
    Returns (value, d(value)/d(render))."""
    image = target.image
    if target.region_mask is None or not np.any(target.region_mask):
        return reconstruction_loss(render, image)
    region = np.asarray(target.region_mask, dtype=bool)
    outside = ~region
    grad = np.zeros_like(render)
    diff = render - image
    n_out = int(outside.sum()) * 3
    l1 = 0.0
    if n_out:
        l1 = float(np.abs(diff[outside]).mean())
        grad[outside] = L1_WEIGHT * np.sign(diff[outside]) / n_out
    y0, y1, x0, x1 = _region_bbox(region)
    ssim, d_ssim = _ssim_core(render[y0:y1, x0:x1], image[y0:y1, x0:x1],
                              want_grad=True)
    grad[y0:y1, x0:x1] -= DSSIM_WEIGHT * d_ssim.reshape(render[y0:y1, x0:x1].shape)
    value = L1_WEIGHT * l1 + DSSIM_WEIGHT * (1.0 - ssim)
    return value, grad


def finetune_group(scene: Scene, group_id: Optional[int], unfreeze: Sequence[str],
                   targets: Sequence[FinetuneTarget], iterations: int,
                   config: Optional[TrainConfig] = None, *,
                   indices: Optional[np.ndarray] = None) -> Scene:
    """Optimize only (selected splats x unfrozen parameters) against target
    views; every other value stays bit-identical. Identity losses are off.

    ``indices`` overrides classification-based selection (used by inpainting,
    whose fresh splats carry no trained identity yet). Targets are visited
    round-robin; optimizer state starts fresh.
    """
    if len(targets) == 0:
        raise ValueError("finetune requires at least one target view")
    unfreeze = tuple(unfreeze)
    if not unfreeze:
        raise ValueError("unfreeze set must not be empty")
    for name in unfreeze:
        if name not in UNFREEZABLE:
            raise ValueError(f"unknown parameter group '{name}'")
    config = config or TrainConfig()
    # the position-lr decay schedule spans this finetune run, not the
    # original training budget
    lr_cfg = replace(config, iterations=iterations)
    out = scene.copy()
    if iterations <= 0:
        return out
    if indices is None:
        indices = select_group(out, classify_gaussians(out), group_id)
    selected = np.zeros(len(out), dtype=bool)
    selected[indices] = True
    frozen = ~selected

    live = tuple(_PARAM_OF[name] for name in unfreeze)
    states = {name: AdamState.like(getattr(out, name), _EPS_OF[name], name)
              for name in live}
    background = np.asarray(config.background, dtype=np.float64)

    for i in range(iterations):
        target = targets[i % len(targets)]
        render = render_forward(out, target.camera, background)
        _, d_render = _masked_loss(render.color, target)
        grads = render_backward(out, target.camera, render, d_render)

        lr_of = {
            "positions": position_lr(lr_cfg, i),
            "log_scales": config.lr_scale,
            "rotations": config.lr_rotation,
            "opacity_logits": config.lr_opacity,
            "sh": config.lr_sh,
            "identities": config.lr_identity,
        }
        for name in live:
            arr = getattr(out, name)
            grad = getattr(grads, name)
            mask = selected.reshape((-1,) + (1,) * (arr.ndim - 1))
            grad = np.where(mask, grad, 0.0)
            new = adam_step(arr, grad, states[name], lr_of[name])
            # freezing is exact, not merely approximate
            new[frozen] = getattr(scene, name)[frozen]
            setattr(out, name, new)
    return out


def inpaint_scaffold(scene: Scene, group_id: int, n_new: int, seed: int = 0) -> Scene:
    """Remove a group (with convex-hull interior) and scatter ``n_new`` fresh
    neutral-gray splats uniformly inside the removed region's bounding box.

    The new splats are the last ``n_new`` rows of the result; fine-tune them
    with ``finetune_group(..., indices=...)`` against externally inpainted
    target images.
    """
    if n_new < 0:
        raise ValueError("n_new must be non-negative")
    labels = classify_gaussians(scene)
    selected = select_group(scene, labels, group_id, convex_hull=True)
    removed_positions = scene.positions[selected]
    keep = np.ones(len(scene), dtype=bool)
    keep[selected] = False
    out = scene.take(np.flatnonzero(keep))
    if n_new == 0:
        return out

    lo = removed_positions.min(axis=0)
    hi = removed_positions.max(axis=0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    fresh = rng.uniform(lo, hi, size=(n_new, 3))
    seeded = init_scene(fresh, np.full((n_new, 3), 0.5),
                        InitConfig(sh_degree=out.sh_degree,
                                   channels=out.classifier.channels),
                        seed=seed)

    return Scene(
        positions=np.concatenate([out.positions, seeded.positions]),
        log_scales=np.concatenate([out.log_scales, seeded.log_scales]),
        rotations=np.concatenate([out.rotations, seeded.rotations]),
        opacity_logits=np.concatenate([out.opacity_logits, seeded.opacity_logits]),
        sh=np.concatenate([out.sh, seeded.sh]),
        identities=np.concatenate([out.identities, seeded.identities]),
        classifier=out.classifier.copy(),
        sh_degree=out.sh_degree,
        metadata=dict(out.metadata),
    )


@dataclass
class EditOperation:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class EditScript:
    operations: list


def apply_edit_script(scene: Scene, script: EditScript,
                      target_loader=None) -> Scene:
    """Run an ordered list of edits. ``target_loader(params) -> [FinetuneTarget]``
    resolves fine-tune target references; required only if the script
    fine-tunes."""
    out = scene
    for op in script.operations:
        kind = op.kind
        p = op.params
        if kind == "remove":
            out = remove_group(out, int(p["id"]), bool(p.get("convex_hull", False)))
        elif kind == "swap":
            out = recompose_swap(out, int(p["id_a"]), int(p["id_b"]))
        elif kind == "recolor":
            if "color" in p:
                out = recolor_group(out, int(p["id"]), p["color"])
            else:
                targets = _resolve_targets(target_loader, p)
                out = finetune_group(out, int(p["id"]), ("sh",), targets,
                                     int(p.get("iterations", 100)))
        elif kind == "finetune":
            targets = _resolve_targets(target_loader, p)
            out = finetune_group(out, int(p["id"]), tuple(p["unfreeze"]),
                                 targets, int(p.get("iterations", 100)))
        elif kind == "inpaint_scaffold":
            out = inpaint_scaffold(out, int(p["id"]), int(p.get("n_new", 2000)),
                                   int(p.get("seed", 0)))
        else:
            raise ValueError(f"unknown edit operation '{kind}'")
    return out


def _resolve_targets(target_loader, params):
    if target_loader is None:
        raise ValueError("edit script needs target views but no loader was given")
    return target_loader(params)
