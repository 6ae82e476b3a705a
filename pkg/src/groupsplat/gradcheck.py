"""Central finite-difference verification of every analytic gradient.

Checks run in 64-bit with step h = 1e-4. A coordinate passes when the
relative error against the central difference is below 1e-4 or the absolute
error is below 1e-7. Coordinates whose +/-h renders change any discrete
blending decision (per-pixel contributor sets, alpha/transmittance clamps,
color clamps) sit on non-differentiable boundaries and are excluded, as are
L1 coordinates within h of the |x| kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .losses import identity_2d_loss, identity_3d_loss, reconstruction_loss
from .rasterizer import render_backward, render_forward
from .scene import Camera, Classifier, Scene

FD_STEP = 1.0e-4
REL_TOL = 1.0e-4
ABS_TOL = 1.0e-7


@dataclass
class ParamReport:
    name: str
    checked: int = 0
    skipped: int = 0
    max_rel_error: float = 0.0
    failures: List[Tuple[int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class GradCheckReport:
    params: List[ParamReport]
    elapsed_seconds: float

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    def summary_lines(self) -> List[str]:
        lines = []
        for p in self.params:
            state = "ok" if p.passed else f"FAIL ({len(p.failures)} coords)"
            lines.append(f"{p.name:28s} checked={p.checked:5d} "
                         f"skipped={p.skipped:4d} max_rel={p.max_rel_error:.3e} {state}")
        lines.append(f"total {'PASS' if self.passed else 'FAIL'} "
                     f"in {self.elapsed_seconds:.1f}s")
        return lines


def _check_array(name: str, array: np.ndarray, analytic: np.ndarray,
                 loss_fn: Callable[[], Optional[float]],
                 h: float = FD_STEP) -> ParamReport:
    """FD-check every coordinate of ``array`` against ``analytic``.
    ``loss_fn`` re-evaluates the loss at the current parameters and returns
    None when the evaluation is structurally different from the base point
    (the coordinate is then excluded)."""
    report = ParamReport(name=name)
    flat = array.reshape(-1)
    gflat = np.asarray(analytic).reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        lp = loss_fn()
        flat[i] = old - h
        lm = loss_fn()
        flat[i] = old
        if lp is None or lm is None:
            report.skipped += 1
            continue
        fd = (lp - lm) / (2.0 * h)
        err = abs(fd - gflat[i])
        rel = err / max(abs(fd), abs(gflat[i]), 1.0e-12)
        report.checked += 1
        if err > ABS_TOL and rel > REL_TOL:
            report.failures.append((i, fd, float(gflat[i]), rel))
        if err > ABS_TOL:
            report.max_rel_error = max(report.max_rel_error, rel)
    return report


# ---------------------------------------------------------------------------
# rendering chain

def random_scene(n: int, sh_degree: int, seed: int,
                 channels: int = 4) -> Scene:
    rng = np.random.default_rng(seed)
    basis = (sh_degree + 1) ** 2
    return Scene(
        positions=rng.normal(0.0, 0.5, (n, 3)),
        log_scales=rng.normal(-1.6, 0.3, (n, 3)),
        rotations=rng.normal(0.0, 1.0, (n, 4)),
        opacity_logits=rng.normal(0.0, 1.0, n),
        sh=rng.normal(0.0, 0.3, (n, basis, 3)),
        identities=rng.normal(0.0, 0.5, (n, 16)),
        classifier=Classifier(rng.normal(0.0, 0.25, (16, channels)),
                              np.zeros(channels)),
        sh_degree=sh_degree,
    )


def default_camera(size: int = 16) -> Camera:
    w2c = np.eye(4)
    w2c[2, 3] = 4.0  # scene sits ~4 units in front of the camera
    return Camera(width=size, height=size, fx=20.0, fy=22.0,
                  cx=size / 2.0, cy=size / 2.0 + 0.3, world_to_camera=w2c)


def _structural_signature(out):
    return (out.contributor_count, out.total_passes,
            out.replay.gaussian_index, out.replay.color_clamped)


def _signatures_equal(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_render_gradients(n_gaussians: int = 20, size: int = 16,
                           sh_degree: int = 3, seed: int = 3,
                           h: float = FD_STEP) -> List[ParamReport]:
    """FD-check render_backward for every splat parameter type, using a fixed
    random linear functional of the color and identity images."""
    rng = np.random.default_rng(seed + 1000)
    scene = random_scene(n_gaussians, sh_degree, seed)
    camera = default_camera(size)
    background = np.array([0.2, 0.3, 0.1])
    w_color = rng.normal(0.0, 1.0, (size, size, 3))
    w_identity = rng.normal(0.0, 1.0, (size, size, 16))

    base = render_forward(scene, camera, background)
    base_sig = _structural_signature(base)
    grads = render_backward(scene, camera, base, w_color, w_identity)

    def loss_fn() -> Optional[float]:
        out = render_forward(scene, camera, background)
        if not _signatures_equal(_structural_signature(out), base_sig):
            return None
        return float(np.sum(out.color * w_color)
                     + np.sum(out.identity_image * w_identity))

    checks = [
        ("render/positions", scene.positions, grads.positions),
        ("render/log_scales", scene.log_scales, grads.log_scales),
        ("render/rotations", scene.rotations, grads.rotations),
        ("render/opacity_logits", scene.opacity_logits, grads.opacity_logits),
        ("render/sh", scene.sh, grads.sh),
        ("render/identities", scene.identities, grads.identities),
    ]
    return [_check_array(name, arr, g, loss_fn, h) for name, arr, g in checks]


# ---------------------------------------------------------------------------
# loss gradients

def check_reconstruction_loss_gradient(size: int = 16, seed: int = 5,
                                       h: float = FD_STEP) -> List[ParamReport]:
    """FD-check d(reconstruction loss)/d(render); coordinates within h of the
    L1 kink |render - target| = 0 are excluded."""
    rng = np.random.default_rng(seed)
    render = rng.uniform(0.05, 0.95, (size, size, 3))
    target = rng.uniform(0.05, 0.95, (size, size, 3))
    _, analytic = reconstruction_loss(render, target)
    kink = np.abs(render - target) <= 2.0 * h

    def loss_fn() -> float:
        return reconstruction_loss(render, target)[0]

    report = ParamReport(name="loss/reconstruction_d_render")
    flat = render.reshape(-1)
    gflat = analytic.reshape(-1)
    kflat = kink.reshape(-1)
    for i in range(flat.size):
        if kflat[i]:
            report.skipped += 1
            continue
        old = flat[i]
        flat[i] = old + h
        lp = loss_fn()
        flat[i] = old - h
        lm = loss_fn()
        flat[i] = old
        fd = (lp - lm) / (2.0 * h)
        err = abs(fd - gflat[i])
        rel = err / max(abs(fd), abs(gflat[i]), 1.0e-12)
        report.checked += 1
        if err > ABS_TOL and rel > REL_TOL:
            report.failures.append((i, fd, float(gflat[i]), rel))
        if err > ABS_TOL:
            report.max_rel_error = max(report.max_rel_error, rel)
    return [report]


def check_identity_2d_loss_gradients(size: int = 12, channels: int = 5,
                                     seed: int = 7,
                                     h: float = FD_STEP) -> List[ParamReport]:
    """FD-check the mask cross-entropy gradients for the identity image and
    the classifier parameters."""
    rng = np.random.default_rng(seed)
    image = rng.normal(0.0, 0.7, (size, size, 16))
    classifier = Classifier(rng.normal(0.0, 0.5, (16, channels)),
                            rng.normal(0.0, 0.2, channels))
    mask = rng.integers(0, channels + 1, (size, size)).astype(np.uint16)

    _, d_image, cgrad = identity_2d_loss(image, classifier, mask)

    def loss_fn() -> float:
        return identity_2d_loss(image, classifier, mask)[0]

    return [
        _check_array("loss/id2d_d_identity_image", image, d_image, loss_fn, h),
        _check_array("loss/id2d_d_classifier_weights", classifier.weights,
                     cgrad.weights, loss_fn, h),
        _check_array("loss/id2d_d_classifier_bias", classifier.bias,
                     cgrad.bias, loss_fn, h),
    ]


def check_identity_3d_loss_gradients(n_gaussians: int = 12, channels: int = 5,
                                     seed: int = 11, k: int = 3, m: int = 40,
                                     h: float = FD_STEP) -> List[ParamReport]:
    """FD-check the spatial KL loss gradients for the identity encodings and
    the classifier parameters (fixed sampling seed keeps neighborhoods
    constant across evaluations). Only the full two-sided gradient mode is
    FD-checkable: with neighbor_grad off the returned vector deliberately
    stops the gradient through the neighbor distributions and is not the
    derivative of the loss value."""
    scene = random_scene(n_gaussians, 0, seed, channels=channels)
    classifier = scene.classifier
    sample_seed = int(np.random.default_rng(seed).integers(1 << 31))

    _, d_identity, cgrad = identity_3d_loss(
        scene, classifier, k=k, m=m, seed=sample_seed, neighbor_grad=True)

    def loss_fn() -> float:
        return identity_3d_loss(scene, classifier, k=k, m=m, seed=sample_seed,
                                neighbor_grad=True)[0]

    return [
        _check_array("loss/id3d_d_identities", scene.identities,
                     d_identity, loss_fn, h),
        _check_array("loss/id3d_d_classifier_weights",
                     classifier.weights, cgrad.weights, loss_fn, h),
        _check_array("loss/id3d_d_classifier_bias", classifier.bias,
                     cgrad.bias, loss_fn, h),
    ]


def run_gradient_suite(n_gaussians: int = 20, size: int = 16,
                       sh_degree: int = 3, seed: int = 3) -> GradCheckReport:
    """The full finite-difference acceptance suite."""
    start = time.perf_counter()
    reports: List[ParamReport] = []
    reports += check_render_gradients(n_gaussians, size, sh_degree, seed)
    reports += check_reconstruction_loss_gradient(seed=seed + 2)
    reports += check_identity_2d_loss_gradients(seed=seed + 4)
    reports += check_identity_3d_loss_gradients(seed=seed + 6)
    return GradCheckReport(params=reports,
                           elapsed_seconds=time.perf_counter() - start)
