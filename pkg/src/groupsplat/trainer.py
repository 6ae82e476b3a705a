"""Joint appearance + identity training with adaptive density control.

Each iteration renders one training view, applies the reconstruction loss to
the color image and the cross-entropy identity loss to the blended identity
features, adds the spatial identity-consistency loss on the splat set, and
takes per-group Adam steps. Screen-space position-gradient statistics drive
periodic densification (clone small / split large splats) and pruning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dataclass_fields
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .losses import (
    ClassifierGrad,
    identity_2d_loss,
    identity_3d_loss,
    reconstruction_loss,
    total_loss,
)
from .rasterizer import SceneGradients, render_backward, render_forward
from .scene import Camera, Scene


@dataclass
class TrainConfig:
    iterations: int = 30_000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5.0e-2
    lr_scale: float = 5.0e-3
    lr_rotation: float = 1.0e-3
    lr_identity: float = 2.5e-3
    lr_classifier: float = 5.0e-4
    lambda_2d: float = 1.0
    lambda_3d: float = 2.0
    knn_k: int = 5
    knn_m: int = 1000
    neighbor_grad: bool = True     # propagate the 3D loss into both KL sides
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15_000
    grad_threshold: float = 2.0e-4
    size_threshold: Optional[float] = None   # None -> 1% of scene extent
    prune_opacity: float = 5.0e-3
    prune_size: Optional[float] = None       # None -> 10% of scene extent
    prune_screen_size: Optional[int] = None  # max pixel radius, None disables
    opacity_reset_interval: int = 3000       # 0 disables (tiny scenes)
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
# identity/classifier use the conventional epsilon; the geometry groups keep
# the tiny epsilon that lets near-zero curvature parameters move
ADAM_EPS_GEOMETRY = 1.0e-15
ADAM_EPS_IDENTITY = 1.0e-8

_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "sh", "identities")
_GROUP_EPS = {
    "positions": ADAM_EPS_GEOMETRY,
    "log_scales": ADAM_EPS_GEOMETRY,
    "rotations": ADAM_EPS_GEOMETRY,
    "opacity_logits": ADAM_EPS_GEOMETRY,
    "sh": ADAM_EPS_GEOMETRY,
    "identities": ADAM_EPS_IDENTITY,
    "classifier.weights": ADAM_EPS_IDENTITY,
    "classifier.bias": ADAM_EPS_IDENTITY,
}


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    eps: float = ADAM_EPS_GEOMETRY
    name: str = "param"

    @staticmethod
    def like(params: np.ndarray, eps: float, name: str) -> "AdamState":
        return AdamState(np.zeros_like(params), np.zeros_like(params), 0, eps, name)

    def remap(self, source: np.ndarray, is_new: np.ndarray):
        """Re-index moments after densification; fresh splats start at zero."""
        self.m = np.where(is_new.reshape((-1,) + (1,) * (self.m.ndim - 1)),
                          0.0, self.m[source])
        self.v = np.where(is_new.reshape((-1,) + (1,) * (self.v.ndim - 1)),
                          0.0, self.v[source])


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns the new parameter array."""
    if not np.isfinite(grads).all():
        raise ValueError(f"non-finite gradient for {state.name}")
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grads
    state.v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1.0 - ADAM_BETA1 ** state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def position_lr(config: TrainConfig, iteration: int) -> float:
    """Exponential decay from lr_position to lr_position_final."""
    span = max(config.iterations - 1, 1)
    t = min(max(iteration / span, 0.0), 1.0)
    return config.lr_position * (config.lr_position_final / config.lr_position) ** t


def scene_extent(positions: np.ndarray) -> float:
    """Bounding-box diagonal of the splat positions."""
    span = positions.max(axis=0) - positions.min(axis=0)
    return float(np.linalg.norm(span))


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient statistics across iterations."""

    grad2d_sum: np.ndarray   # (N,) summed ||dL/d mean2d||
    touch_count: np.ndarray  # (N,) views in which the splat was projected
    max_radius: np.ndarray   # (N,) largest screen radius seen

    @staticmethod
    def zeros(n: int) -> "DensifyStats":
        return DensifyStats(np.zeros(n), np.zeros(n, dtype=np.int64),
                            np.zeros(n, dtype=np.int64))

    def accumulate(self, grads: SceneGradients):
        self.grad2d_sum += grads.grad2d_norm
        self.touch_count += grads.touch_count
        np.maximum(self.max_radius, grads.max_radius, out=self.max_radius)


@dataclass
class SplatRemap:
    """How new scene rows relate to the old ones after density control."""

    source: np.ndarray  # (N',) old row feeding each new row
    is_new: np.ndarray  # (N',) True for freshly created splats


def densify_and_prune(scene: Scene, stats: DensifyStats, config: TrainConfig,
                      rng: Optional[np.random.Generator] = None):
    """Prune dead/oversized splats, then clone or split high-gradient ones.

    Splats whose mean accumulated screen-space position gradient exceeds
    ``grad_threshold`` are densified: split into two children sampled from
    the parent (scales shrunk by 1.6, parent deleted) when the largest
    activated scale exceeds ``size_threshold``, else cloned in place.
    Identity encodings, SH, opacity, and rotation are copied verbatim.
    Returns (new scene, SplatRemap). With no candidates and nothing pruned
    the scene passes through unchanged.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n = len(scene)
    opacity = expit(scene.opacity_logits)
    scales = np.exp(scene.log_scales)
    max_scale = scales.max(axis=1)

    prune = opacity < config.prune_opacity
    if config.prune_size is not None:
        prune |= max_scale > config.prune_size
    if config.prune_screen_size is not None:
        prune |= stats.max_radius > config.prune_screen_size

    mean_grad = stats.grad2d_sum / np.maximum(stats.touch_count, 1)
    candidate = (~prune) & (mean_grad > config.grad_threshold)
    size_threshold = config.size_threshold if config.size_threshold is not None \
        else 0.01 * scene_extent(scene.positions)
    split = candidate & (max_scale > size_threshold)
    clone = candidate & ~split

    keep = ~(prune | split)
    if not keep.any() and not split.any():
        raise RuntimeError("density control removed every splat")
    if not prune.any() and not candidate.any():
        return scene, SplatRemap(source=np.arange(n), is_new=np.zeros(n, dtype=bool))

    keep_idx = np.flatnonzero(keep)
    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)

    pieces = {name: [getattr(scene, name)[keep_idx]] for name in (
        "positions", "log_scales", "rotations", "opacity_logits", "sh", "identities")}
    source = [keep_idx]
    is_new = [np.zeros(keep_idx.size, dtype=bool)]

    if clone_idx.size:
        for name in pieces:
            pieces[name].append(getattr(scene, name)[clone_idx])
        source.append(clone_idx)
        is_new.append(np.ones(clone_idx.size, dtype=bool))

    if split_idx.size:
        from .projection import quat_to_rotmat, normalize_quaternions
        parents = np.repeat(split_idx, 2)
        unit, _ = normalize_quaternions(scene.rotations[parents])
        rot = quat_to_rotmat(unit)
        local = rng.normal(0.0, 1.0, (parents.size, 3)) * scales[parents]
        child_pos = scene.positions[parents] + np.einsum("nij,nj->ni", rot, local)
        for name in pieces:
            pieces[name].append(getattr(scene, name)[parents].copy())
        pieces["positions"][-1] = child_pos
        pieces["log_scales"][-1] = scene.log_scales[parents] - math.log(1.6)
        source.append(parents)
        is_new.append(np.ones(parents.size, dtype=bool))

    new_scene = Scene(
        positions=np.concatenate(pieces["positions"]),
        log_scales=np.concatenate(pieces["log_scales"]),
        rotations=np.concatenate(pieces["rotations"]),
        opacity_logits=np.concatenate(pieces["opacity_logits"]),
        sh=np.concatenate(pieces["sh"]),
        identities=np.concatenate(pieces["identities"]),
        classifier=scene.classifier.copy(),
        sh_degree=scene.sh_degree,
        metadata=dict(scene.metadata),
    )
    return new_scene, SplatRemap(source=np.concatenate(source),
                                 is_new=np.concatenate(is_new))


@dataclass
class TrainingView:
    camera: Camera
    image: np.ndarray              # (H, W, 3) float in [0, 1]
    mask: Optional[np.ndarray]     # (H, W) int ids, 0 = unlabeled


class _ViewSampler:
    """Seeded without-replacement shuffle, reshuffled every epoch."""

    def __init__(self, n: int, seed: int):
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        self._n = n
        self._queue: list[int] = []

    def next(self) -> int:
        if not self._queue:
            self._queue = list(self._rng.permutation(self._n))
        return self._queue.pop(0)


def train(scene: Scene, views: Sequence[TrainingView], config: TrainConfig,
          log_fn: Optional[Callable[[dict], None]] = None):
    """Optimize a copy of ``scene`` against the training views.

    Returns (trained scene, list of per-100-iteration log records). Views
    without masks train reconstruction only (identity losses forced to 0).
    """
    if len(views) == 0:
        raise ValueError("need at least one training view")
    scene = scene.copy()
    have_masks = all(v.mask is not None for v in views)
    if have_masks:
        num_ids = max(int(v.mask.max()) for v in views)
        if num_ids > scene.classifier.channels:
            raise ValueError(
                f"mask id {num_ids} exceeds classifier channels ({scene.classifier.channels})")
    if config.iterations <= 0:
        return scene, []

    extent = scene_extent(scene.positions)
    size_threshold = config.size_threshold if config.size_threshold is not None \
        else 0.01 * extent
    prune_size = config.prune_size if config.prune_size is not None else 0.1 * extent
    run_cfg = TrainConfig(**{f.name: getattr(config, f.name)
                             for f in dataclass_fields(TrainConfig)})
    run_cfg.size_threshold = size_threshold
    run_cfg.prune_size = prune_size

    states = {name: AdamState.like(getattr(scene, name), _GROUP_EPS[name], name)
              for name in _GROUPS}
    states["classifier.weights"] = AdamState.like(
        scene.classifier.weights, ADAM_EPS_IDENTITY, "classifier.weights")
    states["classifier.bias"] = AdamState.like(
        scene.classifier.bias, ADAM_EPS_IDENTITY, "classifier.bias")

    sampler = _ViewSampler(len(views), config.seed)
    stats = DensifyStats.zeros(len(scene))
    background = np.asarray(config.background, dtype=np.float64)
    log: list[dict] = []

    for i in range(config.iterations):
        view = views[sampler.next()]
        out = render_forward(scene, view.camera, background)
        l_rec, d_color = reconstruction_loss(out.color, view.image)

        l_2d = l_3d = 0.0
        d_identity_img = None
        cgrad = ClassifierGrad.zeros(scene.classifier.channels)
        if have_masks:
            l_2d, d_img, cg2 = identity_2d_loss(out.identity_image,
                                                scene.classifier, view.mask)
            d_identity_img = config.lambda_2d * d_img
            cgrad.add_(cg2.scaled(config.lambda_2d))

        grads = render_backward(scene, view.camera, out, d_color, d_identity_img)

        if have_masks:
            seed_i = np.random.SeedSequence([config.seed, 13, i])
            l_3d, d_id3, cg3 = identity_3d_loss(
                scene, scene.classifier, k=config.knn_k, m=config.knn_m,
                seed=seed_i, neighbor_grad=config.neighbor_grad)
            grads.identities += config.lambda_3d * d_id3
            cgrad.add_(cg3.scaled(config.lambda_3d))

        scene.positions = adam_step(scene.positions, grads.positions,
                                    states["positions"], position_lr(config, i))
        scene.log_scales = adam_step(scene.log_scales, grads.log_scales,
                                     states["log_scales"], config.lr_scale)
        scene.rotations = adam_step(scene.rotations, grads.rotations,
                                    states["rotations"], config.lr_rotation)
        scene.opacity_logits = adam_step(scene.opacity_logits, grads.opacity_logits,
                                         states["opacity_logits"], config.lr_opacity)
        scene.sh = adam_step(scene.sh, grads.sh, states["sh"], config.lr_sh)
        scene.identities = adam_step(scene.identities, grads.identities,
                                     states["identities"], config.lr_identity)
        if have_masks:
            scene.classifier.weights = adam_step(
                scene.classifier.weights, cgrad.weights,
                states["classifier.weights"], config.lr_classifier)
            scene.classifier.bias = adam_step(
                scene.classifier.bias, cgrad.bias,
                states["classifier.bias"], config.lr_classifier)

        stats.accumulate(grads)

        iteration = i + 1
        if (config.densify_interval > 0
                and config.densify_from <= iteration <= config.densify_until
                and iteration % config.densify_interval == 0):
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 17, i]))
            scene, remap = densify_and_prune(scene, stats, run_cfg, rng)
            for name in _GROUPS:
                states[name].remap(remap.source, remap.is_new)
            stats = DensifyStats.zeros(len(scene))

        if (config.opacity_reset_interval > 0
                and iteration % config.opacity_reset_interval == 0
                and iteration < config.iterations):
            scene.opacity_logits = np.full(len(scene), float(logit(0.01)))
            states["opacity_logits"].m[:] = 0.0
            states["opacity_logits"].v[:] = 0.0

        if iteration % 100 == 0:
            report = total_loss(l_rec, l_2d, l_3d, config.lambda_2d, config.lambda_3d)
            record = {
                "iteration": iteration,
                "l_rec": report.l_rec,
                "l_2d": report.l_2d,
                "l_3d": report.l_3d,
                "gaussian_count": len(scene),
            }
            log.append(record)
            if log_fn is not None:
                log_fn(record)

    return scene, log
