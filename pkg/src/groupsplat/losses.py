"""Training losses with analytic gradients.

Three terms drive joint appearance/identity training:
  * reconstruction: 0.8 * L1 + 0.2 * (1 - SSIM) between render and target;
  * 2D identity: per-pixel cross-entropy of the classified blended identity
    features against the mask label (label 0 is ignored);
  * 3D identity: mean KL divergence between the class distribution of a
    sampled splat and those of its k nearest spatial neighbors, which pulls
    invisible interior splats toward the label of their surroundings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import log_softmax

from .scene import Classifier, Scene

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
L1_WEIGHT = 0.8
DSSIM_WEIGHT = 0.2

LAMBDA_2D_DEFAULT = 1.0
LAMBDA_3D_DEFAULT = 2.0
KNN_K_DEFAULT = 5
KNN_M_DEFAULT = 1000
KNN_MAX_POINTS = 300_000


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable 'same'-size Gaussian filter with zero padding, per channel."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def ssim_value(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window)."""
    return _ssim_core(np.asarray(x, dtype=np.float64),
                      np.asarray(y, dtype=np.float64), want_grad=False)[0]


def _ssim_core(x, y, want_grad):
    if x.shape != y.shape:
        raise ValueError("image shapes differ")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    mu_x = _blur(x)
    mu_y = _blur(y)
    sig_xx = _blur(x * x) - mu_x * mu_x
    sig_yy = _blur(y * y) - mu_y * mu_y
    sig_xy = _blur(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sig_xy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sig_xx + sig_yy + SSIM_C2
    ssim_map = (a1 * a2) / (b1 * b2)
    value = float(ssim_map.mean())
    if not want_grad:
        return value, None
    # d(mean ssim)/dx: per-pixel partials wrt (mu_x, sig_xx, sig_xy), then the
    # adjoint of the blur (the kernel is symmetric, so blur again)
    npix = ssim_map.size
    d_map = 1.0 / npix
    d_a1 = d_map * a2 / (b1 * b2)
    d_a2 = d_map * a1 / (b1 * b2)
    d_b1 = -d_map * ssim_map / b1
    d_b2 = -d_map * ssim_map / b2
    d_mu_x = 2.0 * mu_y * d_a1 + 2.0 * mu_x * d_b1
    d_sig_xx = d_b2
    d_sig_xy = 2.0 * d_a2
    local = d_mu_x - 2.0 * mu_x * d_sig_xx - mu_y * d_sig_xy
    grad = _blur(local) + 2.0 * x * _blur(d_sig_xx) + y * _blur(d_sig_xy)
    return value, grad


def reconstruction_loss(render: np.ndarray, target: np.ndarray):
    """0.8 L1 + 0.2 (1 - SSIM). Returns (value, d(value)/d(render))."""
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render.shape != target.shape:
        raise ValueError("render and target shapes differ")
    diff = render - target
    l1 = float(np.abs(diff).mean())
    ssim, d_ssim = _ssim_core(render, target, want_grad=True)
    value = L1_WEIGHT * l1 + DSSIM_WEIGHT * (1.0 - ssim)
    grad = L1_WEIGHT * np.sign(diff) / diff.size - DSSIM_WEIGHT * d_ssim.reshape(render.shape)
    return value, grad


@dataclass
class ClassifierGrad:
    weights: np.ndarray  # (16, C)
    bias: np.ndarray     # (C,)

    @staticmethod
    def zeros(channels: int) -> "ClassifierGrad":
        return ClassifierGrad(np.zeros((16, channels)), np.zeros(channels))

    def scaled(self, factor: float) -> "ClassifierGrad":
        return ClassifierGrad(self.weights * factor, self.bias * factor)

    def add_(self, other: "ClassifierGrad"):
        self.weights += other.weights
        self.bias += other.bias


def identity_2d_loss(identity_image: np.ndarray, classifier: Classifier,
                     mask: np.ndarray):
    """Mean cross-entropy of classified identity features vs. mask labels.

    mask values: 0 = unlabeled (ignored); v in 1..C selects channel v-1.
    Returns (value, d/d(identity_image), ClassifierGrad). All-ignored masks
    give a zero loss and zero gradients.
    """
    identity_image = np.asarray(identity_image, dtype=np.float64)
    mask = np.asarray(mask)
    if identity_image.ndim != 3 or identity_image.shape[:2] != mask.shape:
        raise ValueError("identity image and mask shapes differ")
    if mask.min() < 0:
        raise ValueError("mask ids must be non-negative")
    c = classifier.channels
    if mask.max() > c:
        raise ValueError(f"mask id {int(mask.max())} exceeds classifier channels ({c})")

    d_image = np.zeros_like(identity_image)
    labeled = mask > 0
    n_labeled = int(labeled.sum())
    if n_labeled == 0:
        return 0.0, d_image, ClassifierGrad.zeros(c)

    feats = identity_image[labeled]               # (P, 16)
    labels = mask[labeled].astype(np.int64) - 1   # (P,)
    logits = classifier.logits(feats)
    logp = log_softmax(logits, axis=1)
    value = float(-logp[np.arange(n_labeled), labels].mean())

    d_logits = np.exp(logp)
    d_logits[np.arange(n_labeled), labels] -= 1.0
    d_logits /= n_labeled
    d_image[labeled] = d_logits @ classifier.weights.T
    cgrad = ClassifierGrad(weights=feats.T @ d_logits, bias=d_logits.sum(axis=0))
    return value, d_image, cgrad


def _knn_indices(positions: np.ndarray, sample_idx: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest others per sampled point; distance ties broken by
    ascending index. Returns (m, k) indices."""
    samp = positions[sample_idx]
    d2 = (np.einsum("md,md->m", samp, samp)[:, None]
          + np.einsum("nd,nd->n", positions, positions)[None, :]
          - 2.0 * (samp @ positions.T))
    rows = np.arange(sample_idx.shape[0])
    d2[rows, sample_idx] = np.inf  # a point is not its own neighbor
    kth = np.partition(d2, k - 1, axis=1)[:, k - 1]
    counts = (d2 <= kth[:, None]).sum(axis=1)
    neighbors = np.argpartition(d2, k - 1, axis=1)[:, :k]
    tie_rows = np.flatnonzero(counts != k)
    for r in tie_rows:
        strictly = np.flatnonzero(d2[r] < kth[r])
        equal = np.flatnonzero(d2[r] == kth[r])
        neighbors[r] = np.concatenate([strictly, equal[: k - strictly.size]])
    return neighbors


def identity_3d_loss(scene: Scene, classifier: Classifier,
                     k: int = KNN_K_DEFAULT, m: int = KNN_M_DEFAULT,
                     seed: int = 0, *, neighbor_grad: bool = True,
                     max_points: int = KNN_MAX_POINTS):
    """Spatial identity-consistency loss.

    Samples m splats uniformly (with replacement, seeded), finds each one's
    k nearest other splats by position, and averages KL(P_j || Q_ji) over all
    (sample, neighbor) pairs, where P/Q are the classifier softmax of the
    respective identity encodings. Gradients flow to both sides of the KL
    unless ``neighbor_grad`` is False. Scenes above ``max_points`` splats are
    stride-downsampled before sampling.

    Returns (value, d/d(identities) as an (N, 16) array, ClassifierGrad).
    """
    if k < 1:
        raise ValueError("need at least one neighbor")
    n = len(scene)
    if k >= n:
        raise ValueError(
            f"neighbor count k={k} must be smaller than the scene size ({n})"
        )
    d_identity = np.zeros((n, 16))
    cgrad = ClassifierGrad.zeros(classifier.channels)
    if m < 1:
        return 0.0, d_identity, cgrad

    pool = np.arange(n)
    if n > max_points:
        stride = int(np.ceil(n / max_points))
        pool = pool[::stride]
    positions = scene.positions[pool]
    if pool.shape[0] < 2:
        return 0.0, d_identity, cgrad
    k = min(k, pool.shape[0] - 1)

    rng = np.random.default_rng(seed)
    sample_rows = rng.integers(0, pool.shape[0], size=m)
    neighbor_rows = _knn_indices(positions, sample_rows, k)   # (m, k)

    sample_idx = pool[sample_rows]
    neighbor_idx = pool[neighbor_rows]

    needed = np.unique(np.concatenate([sample_rows, neighbor_rows.ravel()]))
    log_soft = log_softmax(classifier.logits(scene.identities[pool[needed]]), axis=1)
    row_of = np.zeros(pool.shape[0], dtype=np.int64)
    row_of[needed] = np.arange(needed.shape[0])
    logp = log_soft[row_of[sample_rows]]                              # (m, C)
    logq = log_soft[row_of[neighbor_rows]]                            # (m, k, C)
    p = np.exp(logp)
    kl = (p[:, None, :] * (logp[:, None, :] - logq)).sum(axis=2)      # (m, k)
    scale = 1.0 / (m * k)
    value = float(kl.sum() * scale)

    # sample side: d KL / d z_p = P * (logP - logQ - KL)
    d_zp = (p[:, None, :] * (logp[:, None, :] - logq - kl[:, :, None])).sum(axis=1) * scale
    np.add.at(d_identity, sample_idx, d_zp @ classifier.weights.T)
    cgrad.weights += scene.identities[sample_idx].T @ d_zp
    cgrad.bias += d_zp.sum(axis=0)

    if neighbor_grad:
        d_zq = (np.exp(logq) - p[:, None, :]) * scale                 # (m, k, C)
        flat_idx = neighbor_idx.reshape(-1)
        flat_dzq = d_zq.reshape(-1, classifier.channels)
        np.add.at(d_identity, flat_idx, flat_dzq @ classifier.weights.T)
        cgrad.weights += scene.identities[flat_idx].T @ flat_dzq
        cgrad.bias += flat_dzq.sum(axis=0)

    return value, d_identity, cgrad


@dataclass
class LossReport:
    l_rec: float
    l_2d: float
    l_3d: float
    lambda_2d: float
    lambda_3d: float
    total: float


def total_loss(l_rec: float, l_2d: float, l_3d: float,
               lambda_2d: float = LAMBDA_2D_DEFAULT,
               lambda_3d: float = LAMBDA_3D_DEFAULT) -> LossReport:
    return LossReport(
        l_rec=l_rec, l_2d=l_2d, l_3d=l_3d,
        lambda_2d=lambda_2d, lambda_3d=lambda_3d,
        total=l_rec + lambda_2d * l_2d + lambda_3d * l_3d,
    )
