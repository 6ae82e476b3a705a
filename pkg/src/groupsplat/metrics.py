"""Image and segmentation quality metrics."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_erosion

from .losses import ssim_value

PSNR_CAP = 100.0
BOUNDARY_BAND_FRACTION = 0.02


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100."""
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((image - reference) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(image: np.ndarray, reference: np.ndarray) -> float:
    return ssim_value(image, reference)


def _iou(pred: np.ndarray, truth: np.ndarray) -> float:
    inter = float(np.count_nonzero(pred & truth))
    union = float(np.count_nonzero(pred | truth))
    if union == 0.0:
        return 1.0
    return inter / union


def _id_pairs_or_default(pred_mask: np.ndarray, true_mask: np.ndarray,
                         id_pairs, include_background: bool):
    """Explicit (pred id, true id) pairs, or the identity pairing over every
    id present in either mask. In explicit pairs a non-positive id means "no
    counterpart" (compares against the empty set); in the default identity
    pairing ids are literal."""
    if id_pairs is not None:
        return [(int(p), int(t)) for p, t in id_pairs], False
    ids = np.union1d(np.unique(pred_mask), np.unique(true_mask))
    if not include_background:
        ids = ids[ids > 0]
    return [(int(i), int(i)) for i in ids], True


def _id_set(mask: np.ndarray, label: int, literal: bool) -> np.ndarray:
    if label <= 0 and not literal:
        return np.zeros(mask.shape, dtype=bool)
    return mask == label


def miou(pred_mask: np.ndarray, true_mask: np.ndarray,
         include_background: bool = False,
         id_pairs: Optional[Sequence[Tuple[int, int]]] = None) -> float:
    """Mean intersection-over-union over matched id pairs (by default the
    identity pairing over ids present in either mask)."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError("mask shapes differ")
    pairs, literal = _id_pairs_or_default(pred_mask, true_mask, id_pairs,
                                          include_background)
    if len(pairs) == 0:
        return 1.0
    return float(np.mean([_iou(_id_set(pred_mask, p, literal),
                               _id_set(true_mask, t, literal))
                          for p, t in pairs]))


def _boundary_band(mask: np.ndarray, band: int) -> np.ndarray:
    """Pixels of ``mask`` within ``band`` pixels (Chebyshev) of its boundary.

    The boundary strip is the mask minus its erosion; pixels at the image
    edge count as boundary.
    """
    structure = np.ones((3, 3), dtype=bool)
    eroded = binary_erosion(mask, structure=structure, iterations=band,
                            border_value=0)
    return mask & ~eroded


def boundary_band_width(shape, band_fraction: float = BOUNDARY_BAND_FRACTION) -> int:
    h, w = shape
    return max(1, int(round(band_fraction * float(np.hypot(h, w)))))


def mbiou(pred_mask: np.ndarray, true_mask: np.ndarray,
          band_fraction: float = BOUNDARY_BAND_FRACTION,
          id_pairs: Optional[Sequence[Tuple[int, int]]] = None,
          band: Optional[int] = None) -> float:
    """Mean boundary IoU: IoU restricted to a thin strip inside each mask's
    boundary, averaged over matched foreground id pairs. Band width defaults
    to ``band_fraction`` of the image diagonal (at least one pixel)."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError("mask shapes differ")
    if band is None:
        band = boundary_band_width(pred_mask.shape, band_fraction)
    pairs, literal = _id_pairs_or_default(pred_mask, true_mask, id_pairs,
                                          include_background=False)
    pairs = [(p, t) for p, t in pairs if p > 0 or t > 0]
    if len(pairs) == 0:
        return 1.0
    scores = []
    for p, t in pairs:
        pred_b = _boundary_band(_id_set(pred_mask, p, literal), band)
        true_b = _boundary_band(_id_set(true_mask, t, literal), band)
        scores.append(_iou(pred_b, true_b))
    return float(np.mean(scores))


def match_ids(pred_masks: Sequence[np.ndarray],
              true_masks: Sequence[np.ndarray]) -> List[Tuple[int, int]]:
    """Greedy one-to-one (pred id, true id) pairing by descending IoU
    aggregated over all views. Unmatched ids pair with 0 (empty set) so they
    still count against the mean."""
    if len(pred_masks) != len(true_masks):
        raise ValueError("mask list lengths differ")
    pred_ids = np.unique(np.concatenate([np.unique(m) for m in pred_masks]))
    true_ids = np.unique(np.concatenate([np.unique(m) for m in true_masks]))
    pred_ids = pred_ids[pred_ids > 0]
    true_ids = true_ids[true_ids > 0]
    if pred_ids.size == 0 and true_ids.size == 0:
        return []
    inter = np.zeros((pred_ids.size, true_ids.size), dtype=np.int64)
    area_p = np.zeros(pred_ids.size, dtype=np.int64)
    area_t = np.zeros(true_ids.size, dtype=np.int64)
    for pm, tm in zip(pred_masks, true_masks):
        pi = np.searchsorted(pred_ids, pm)
        ti = np.searchsorted(true_ids, tm)
        valid = (pm > 0) & (tm > 0)
        np.add.at(inter, (pi[valid], ti[valid]), 1)
        area_p += np.array([(pm == i).sum() for i in pred_ids])
        area_t += np.array([(tm == i).sum() for i in true_ids])
    union = area_p[:, None] + area_t[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    pairs: List[Tuple[int, int]] = []
    if iou.size:
        order = np.argsort(-iou, axis=None, kind="stable")
        used_p, used_t = set(), set()
        for flat in order:
            i, j = np.unravel_index(flat, iou.shape)
            if iou[i, j] <= 0.0:
                break
            p, t = int(pred_ids[i]), int(true_ids[j])
            if p in used_p or t in used_t:
                continue
            pairs.append((p, t))
            used_p.add(p)
            used_t.add(t)
        for p in pred_ids:
            if int(p) not in used_p:
                pairs.append((int(p), 0))
        for t in true_ids:
            if int(t) not in used_t:
                pairs.append((0, int(t)))
    return pairs


def segmentation_scores(pred_masks, true_masks,
                        id_pairs: Optional[Sequence[Tuple[int, int]]] = None) -> dict:
    """Average mIoU / mBIoU over paired view lists."""
    if len(pred_masks) != len(true_masks):
        raise ValueError("mask list lengths differ")
    mious = [miou(p, t, id_pairs=id_pairs) for p, t in zip(pred_masks, true_masks)]
    mbious = [mbiou(p, t, id_pairs=id_pairs) for p, t in zip(pred_masks, true_masks)]
    return {"miou": float(np.mean(mious)), "mbiou": float(np.mean(mbious))}
