"""Differentiable CPU rasterizer for splat scenes.

Forward: per pixel, splats are composited front to back in depth order.
Each splat contributes alpha' = min(0.99, opacity * exp(-0.5 d^T conic d));
contributions below 1/255 are skipped, and a pixel stops accepting
contributions once its transmittance T drops below 1e-4 (the splat that
crosses the threshold is still blended). Color is composited over a
background color using the final transmittance; the 16-channel identity
image uses the same weights with no background term.

The implementation is vectorized over a flat (splat, pixel) pair table.
The sequential per-pixel product of (1 - alpha') becomes a segmented
cumulative sum of log(1 - alpha'); a pair is blended exactly when its
pre-blend transmittance is still >= 1e-4, which reproduces the sequential
early-stop rule because transmittance only decreases. The backward pass
rebuilds the same table and walks the closed-form gradient of the blend,
using the stored final transmittance instead of per-pixel contributor lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import sh as shlib
from .projection import (
    ALPHA_CLAMP,
    ALPHA_SKIP,
    COV2D_DILATION,
    STOP_TRANSMITTANCE,
    Projected2D,
    Projection,
    perspective_jacobian,
    project_scene,
    quat_rotmat_grad,
    quat_to_rotmat,
    normalize_quaternions,
)
from .scene import Camera, Scene, sh_basis_size


def alpha_at_pixel(projected: Projected2D, opacity: float, pixel) -> float:
    """Blend weight of a footprint at a pixel sample point.

    ``pixel`` is the sample coordinate (pixel center = index + 0.5).
    Returns min(0.99, opacity * exp(-0.5 d^T conic d)); callers skip
    contributions below 1/255.
    """
    d = np.asarray(pixel, dtype=np.float64) - projected.mean2d
    a, b, c = projected.conic
    power = -0.5 * (a * d[0] * d[0] + 2.0 * b * d[0] * d[1] + c * d[1] * d[1])
    return float(min(ALPHA_CLAMP, opacity * np.exp(power)))


@dataclass
class RenderOutput:
    color: np.ndarray                # (H, W, 3), composited over background
    identity_image: np.ndarray       # (H, W, 16)
    final_transmittance: np.ndarray  # (H, W)
    contributor_count: np.ndarray    # (H, W) int, blended splats per pixel
    total_passes: np.ndarray         # (H, W) int, alpha-passing visits per pixel
    background: np.ndarray           # (3,)
    camera: Camera
    replay: Projection               # depth-ordered footprints kept for backward
    scene_size: int


@dataclass
class SceneGradients:
    """Per-parameter gradients plus densification statistics."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    identities: np.ndarray
    grad2d_norm: np.ndarray   # (N,) ||dL/d mean2d|| per splat for this view
    touch_count: np.ndarray   # (N,) int, 1 for every projected splat
    max_radius: np.ndarray    # (N,) int, screen radius seen this view

    @staticmethod
    def zeros(scene: Scene) -> "SceneGradients":
        n = len(scene)
        basis = sh_basis_size(scene.sh_degree)
        return SceneGradients(
            positions=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            opacity_logits=np.zeros(n),
            sh=np.zeros((n, basis, 3)),
            identities=np.zeros((n, 16)),
            grad2d_norm=np.zeros(n),
            touch_count=np.zeros(n, dtype=np.int64),
            max_radius=np.zeros(n, dtype=np.int64),
        )


@dataclass
class _PairTable:
    """Flat (splat, pixel) contribution table, sorted by pixel then depth."""

    pix: np.ndarray        # (P,) linear pixel index, sorted ascending
    pos: np.ndarray        # (P,) row into the Projection arrays
    dx: np.ndarray         # (P,) pixel center minus splat mean, x
    dy: np.ndarray
    alpha: np.ndarray      # (P,) clamped alpha'
    alpha_clamped: np.ndarray  # (P,) bool, hit the 0.99 ceiling
    t_before: np.ndarray   # (P,) transmittance before this pair blends
    composite: np.ndarray  # (P,) bool, pair actually blended
    seg_start: np.ndarray  # (S,) first table row of each pixel segment
    seg_len: np.ndarray    # (S,) rows per pixel segment
    seg_of: np.ndarray     # (P,) segment index of each row


def _build_pair_table(proj: Projection, width: int, height: int) -> _PairTable | None:
    m = len(proj)
    if m == 0:
        return None
    ux, uy = proj.mean2d[:, 0], proj.mean2d[:, 1]
    r = proj.radius.astype(np.float64)
    # pixel index range whose centers fall inside [u - r, u + r]
    x0 = np.clip(np.ceil(ux - r - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(ux + r - 0.5) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.ceil(uy - r - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(uy + r - 0.5) + 1, 0, height).astype(np.int64)
    w = np.maximum(x1 - x0, 0)
    h = np.maximum(y1 - y0, 0)
    counts = w * h
    total = int(counts.sum())
    if total == 0:
        return None

    pos = np.repeat(np.arange(m, dtype=np.int64), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    k = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    w_rep = np.repeat(w, counts)
    local_x = k % np.maximum(w_rep, 1)
    local_y = k // np.maximum(w_rep, 1)
    px = np.repeat(x0, counts) + local_x
    py = np.repeat(y0, counts) + local_y

    dx = (px.astype(np.float64) + 0.5) - ux[pos]
    dy = (py.astype(np.float64) + 0.5) - uy[pos]
    ca = proj.conic[pos, 0]
    cb = proj.conic[pos, 1]
    cc = proj.conic[pos, 2]
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    alpha_raw = proj.opacity[pos] * np.exp(power)
    keep = alpha_raw >= ALPHA_SKIP
    if not keep.any():
        return None

    pix = py[keep] * width + px[keep]
    pos = pos[keep]
    dx = dx[keep]
    dy = dy[keep]
    alpha_raw = alpha_raw[keep]
    alpha_clamped = alpha_raw > ALPHA_CLAMP
    alpha = np.minimum(alpha_raw, ALPHA_CLAMP)

    # stable sort groups pairs by pixel while preserving depth order
    order = np.argsort(pix, kind="stable")
    pix = pix[order]
    pos = pos[order]
    dx = dx[order]
    dy = dy[order]
    alpha = alpha[order]
    alpha_clamped = alpha_clamped[order]

    log_om = np.log1p(-alpha)
    cs = np.cumsum(log_om)
    excl = np.concatenate(([0.0], cs[:-1]))
    seg_start = np.concatenate(([0], np.flatnonzero(np.diff(pix)) + 1))
    seg_len = np.diff(np.concatenate((seg_start, [pix.shape[0]])))
    seg_of = np.repeat(np.arange(seg_start.shape[0]), seg_len)
    excl_seg = excl - excl[seg_start][seg_of]
    t_before = np.exp(excl_seg)
    composite = t_before >= STOP_TRANSMITTANCE
    return _PairTable(pix, pos, dx, dy, alpha, alpha_clamped, t_before, composite,
                      seg_start, seg_len, seg_of)


def _segmented_inclusive_cumsum(values: np.ndarray, table: _PairTable) -> np.ndarray:
    """Per-pixel-segment inclusive cumulative sum along axis 0 (1D or 2D)."""
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    cs = np.cumsum(values, axis=0)
    base = np.zeros((table.seg_start.shape[0], values.shape[1]))
    base[1:] = cs[table.seg_start[1:] - 1]
    out = cs - base[table.seg_of]
    return out[:, 0] if squeeze else out


def render_forward(scene: Scene, camera: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Render color, identity features, and transmittance for one view."""
    background = np.asarray(background, dtype=np.float64)
    if background.shape != (3,):
        raise ValueError("background must be an RGB triple")
    proj = project_scene(scene, camera)
    h, w = camera.height, camera.width
    hw = h * w

    color = np.zeros((hw, 3))
    identity = np.zeros((hw, 16))
    log_t = np.zeros(hw)
    contrib = np.zeros(hw, dtype=np.int64)
    passes = np.zeros(hw, dtype=np.int64)

    table = _build_pair_table(proj, w, h)
    if table is not None:
        wgt = np.where(table.composite, table.alpha * table.t_before, 0.0)
        payload = np.empty((table.pix.shape[0], 21))
        payload[:, 0:3] = proj.color[table.pos]
        payload[:, 3:19] = proj.identity[table.pos]
        payload[:, 0:19] *= wgt[:, None]
        payload[:, 19] = np.where(table.composite, np.log1p(-table.alpha), 0.0)
        payload[:, 20] = table.composite
        sums = np.add.reduceat(payload, table.seg_start, axis=0)
        pix_u = table.pix[table.seg_start]
        color[pix_u] = sums[:, 0:3]
        identity[pix_u] = sums[:, 3:19]
        log_t[pix_u] = sums[:, 19]
        contrib[pix_u] = np.rint(sums[:, 20]).astype(np.int64)
        passes[pix_u] = table.seg_len

    t_final = np.exp(log_t)
    color = color + background[None, :] * t_final[:, None]
    return RenderOutput(
        color=color.reshape(h, w, 3),
        identity_image=identity.reshape(h, w, 16),
        final_transmittance=t_final.reshape(h, w),
        contributor_count=contrib.reshape(h, w),
        total_passes=passes.reshape(h, w),
        background=background,
        camera=camera,
        replay=proj,
        scene_size=len(scene),
    )


def _same_camera(a: Camera, b: Camera) -> bool:
    return (
        a.width == b.width and a.height == b.height
        and a.fx == b.fx and a.fy == b.fy and a.cx == b.cx and a.cy == b.cy
        and a.near == b.near and a.far == b.far
        and np.array_equal(a.world_to_camera, b.world_to_camera)
    )


def render_backward(scene: Scene, camera: Camera, output: RenderOutput,
                    d_color: np.ndarray, d_identity: np.ndarray | None = None) -> SceneGradients:
    """Chain upstream image gradients into every scene parameter.

    ``d_color`` is dL/d(color image) (H, W, 3); ``d_identity`` optionally
    dL/d(identity image) (H, W, 16). The replay inside ``output`` must come
    from a forward render of the same scene and camera.
    """
    if output.scene_size != len(scene):
        raise ValueError("replay does not match scene: splat count changed")
    if not _same_camera(camera, output.camera):
        raise ValueError("replay does not match camera")
    h, w = camera.height, camera.width
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_color.shape != (h, w, 3):
        raise ValueError("d_color must be (H, W, 3)")
    if d_identity is None:
        d_identity = np.zeros((h, w, 16))
    d_identity = np.asarray(d_identity, dtype=np.float64)
    if d_identity.shape != (h, w, 16):
        raise ValueError("d_identity must be (H, W, 16)")

    grads = SceneGradients.zeros(scene)
    proj = output.replay
    m = len(proj)
    if m == 0:
        return grads
    if proj.gaussian_index.max(initial=-1) >= len(scene):
        raise ValueError("replay does not match scene: splat index out of range")

    grads.touch_count[proj.gaussian_index] = 1
    np.maximum.at(grads.max_radius, proj.gaussian_index, proj.radius)

    hw = h * w
    dc_flat = d_color.reshape(hw, 3)
    de_flat = d_identity.reshape(hw, 16)
    t_final_flat = output.final_transmittance.reshape(hw)
    color_blend = (output.color - output.background[None, None, :]
                   * output.final_transmittance[:, :, None]).reshape(hw, 3)
    ident_blend = output.identity_image.reshape(hw, 16)

    table = _build_pair_table(proj, w, h)
    d_mean2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_alpha_act = np.zeros(m)
    d_color_splat = np.zeros((m, 3))
    d_ident_splat = np.zeros((m, 16))

    if table is not None:
        comp = table.composite
        alpha = table.alpha
        t_before = table.t_before
        wgt = np.where(comp, alpha * t_before, 0.0)
        one_minus = 1.0 - alpha
        pix = table.pix
        pos = table.pos

        # d(out)/d(alpha'_i) = f_i T_i - suffix_i / (1 - alpha'_i), where the
        # suffix is everything blended behind i (background folded into color).
        # Project every channel onto the upstream image gradient first: the
        # gradient is constant within a pixel segment, so the 19-channel
        # suffix collapses to the suffix of one scalar.
        dcp = dc_flat[pix]
        dep = de_flat[pix]
        s_pair = (np.einsum("pc,pc->p", dcp, proj.color[pos])
                  + np.einsum("pc,pc->p", dep, proj.identity[pos]))
        # upstream-projected full pixel output, background included
        dot_blend = (np.einsum("nc,nc->n", dc_flat,
                               color_blend + output.background[None, :] * t_final_flat[:, None])
                     + np.einsum("nc,nc->n", de_flat, ident_blend))
        incl_u = _segmented_inclusive_cumsum(s_pair * wgt, table)
        suffix_u = dot_blend[pix] - incl_u
        live = comp & ~table.alpha_clamped  # clamped pairs pass no alpha gradient
        g_alpha = np.where(live, s_pair * t_before - suffix_u / one_minus, 0.0)

        for ch in range(3):
            d_color_splat[:, ch] = np.bincount(pos, weights=dcp[:, ch] * wgt, minlength=m)
        for ch in range(16):
            d_ident_splat[:, ch] = np.bincount(pos, weights=dep[:, ch] * wgt, minlength=m)

        d_power = g_alpha * alpha
        gexp = alpha / proj.opacity[pos]  # exp(power); alpha below the clamp
        d_alpha_act = np.bincount(pos, weights=g_alpha * gexp, minlength=m)
        dx, dy = table.dx, table.dy
        d_conic[:, 0] = np.bincount(pos, weights=d_power * (-0.5 * dx * dx), minlength=m)
        d_conic[:, 1] = np.bincount(pos, weights=d_power * (-dx * dy), minlength=m)
        d_conic[:, 2] = np.bincount(pos, weights=d_power * (-0.5 * dy * dy), minlength=m)
        ca, cb, cc = proj.conic[pos, 0], proj.conic[pos, 1], proj.conic[pos, 2]
        d_mean2d[:, 0] = np.bincount(pos, weights=d_power * (ca * dx + cb * dy), minlength=m)
        d_mean2d[:, 1] = np.bincount(pos, weights=d_power * (cb * dx + cc * dy), minlength=m)

    _chain_to_parameters(scene, camera, proj, grads,
                         d_mean2d, d_conic, d_alpha_act, d_color_splat, d_ident_splat)
    grads.grad2d_norm[proj.gaussian_index] = np.linalg.norm(d_mean2d, axis=1)
    return grads


def _chain_to_parameters(scene: Scene, camera: Camera, proj: Projection,
                         grads: SceneGradients, d_mean2d, d_conic, d_alpha_act,
                         d_color_splat, d_ident_splat):
    """Propagate per-splat screen-space gradients into raw parameters."""
    idx = proj.gaussian_index
    m = idx.shape[0]
    if m == 0:
        return
    r_wc = camera.rotation
    p_cam = scene.positions[idx] @ r_wc.T + camera.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    fx, fy = camera.fx, camera.fy

    # conic -> dilated cov2d (a, b, c); conic = (c, -b, a) / det
    a, b, c = proj.cov2d[:, 0], proj.cov2d[:, 1], proj.cov2d[:, 2]
    det = a * c - b * b
    inv2 = 1.0 / (det * det)
    ga, gb, gc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    d_a = inv2 * (-c * c * ga + b * c * gb + (det - a * c) * gc)
    d_b = inv2 * (2.0 * b * c * ga - (det + 2.0 * b * b) * gb + 2.0 * a * b * gc)
    d_c = inv2 * ((det - a * c) * ga + a * b * gb - a * a * gc)

    # cov2d = A cov3d A^T with A = J R; symmetric upstream seed
    gy = np.empty((m, 2, 2))
    gy[:, 0, 0] = d_a
    gy[:, 0, 1] = 0.5 * d_b
    gy[:, 1, 0] = 0.5 * d_b
    gy[:, 1, 1] = d_c
    scales = np.exp(scene.log_scales[idx])
    unit_q, q_norm = normalize_quaternions(scene.rotations[idx])
    rot = quat_to_rotmat(unit_q)
    mmat = rot * scales[:, None, :]
    cov3d = mmat @ np.swapaxes(mmat, 1, 2)
    j = perspective_jacobian(p_cam, fx, fy)
    a_mat = j @ r_wc
    d_cov3d = np.swapaxes(a_mat, 1, 2) @ gy @ a_mat
    d_amat = 2.0 * gy @ a_mat @ cov3d
    d_j = d_amat @ r_wc.T

    d_pcam = np.zeros((m, 3))
    zz = z * z
    d_pcam[:, 0] = d_j[:, 0, 2] * (-fx / zz)
    d_pcam[:, 1] = d_j[:, 1, 2] * (-fy / zz)
    d_pcam[:, 2] = (d_j[:, 0, 0] * (-fx / zz) + d_j[:, 1, 1] * (-fy / zz)
                    + d_j[:, 0, 2] * (2.0 * fx * x / (zz * z))
                    + d_j[:, 1, 2] * (2.0 * fy * y / (zz * z)))

    # cov3d = M M^T
    d_m = 2.0 * d_cov3d @ mmat
    d_rot = d_m * scales[:, None, :]
    d_scales = np.einsum("nij,nij->nj", d_m, rot)
    d_log_scales = d_scales * scales

    rot_grad = quat_rotmat_grad(unit_q)               # (M, 4, 3, 3)
    d_unit_q = np.einsum("nij,nkij->nk", d_rot, rot_grad)
    # unit = q / |q|: J = (I - unit unit^T) / |q|
    d_q = (d_unit_q - unit_q * np.sum(d_unit_q * unit_q, axis=1, keepdims=True)) / q_norm[:, None]

    # projection of the mean uses the same perspective Jacobian
    d_pcam += np.einsum("nij,ni->nj", j, d_mean2d)
    d_pos = d_pcam @ r_wc

    # SH color path: color depends on coefficients and the view direction
    diff = scene.positions[idx] - camera.center
    dist = np.linalg.norm(diff, axis=1, keepdims=True)
    dirs = diff / dist
    d_sh, d_dirs = shlib.backward_color(scene.sh_degree, scene.sh[idx], dirs,
                                        proj.color_clamped, d_color_splat)
    d_pos += (d_dirs - dirs * np.sum(d_dirs * dirs, axis=1, keepdims=True)) / dist

    opacity = proj.opacity
    d_opacity_logit = d_alpha_act * opacity * (1.0 - opacity)

    grads.positions[idx] += d_pos
    grads.log_scales[idx] += d_log_scales
    grads.rotations[idx] += d_q
    grads.opacity_logits[idx] += d_opacity_logit
    grads.sh[idx] += d_sh
    grads.identities[idx] += d_ident_splat
