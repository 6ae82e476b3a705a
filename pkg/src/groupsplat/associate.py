"""Greedy cross-view instance-id association.

Per-view instance masks arrive with arbitrary local labels; this module
relabels them so the same physical object keeps one id across the whole
camera path. View 0 defines ids 1..n; each later view matches its masks to
the previous view's by descending pairwise IoU (one-to-one, IoU >= 0.3), and
unmatched masks above an area floor spawn fresh ids.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

IOU_MATCH_THRESHOLD = 0.3
# unmatched masks smaller than this fraction of the image are treated as
# noise and dropped to the ignore label instead of spawning a new id
SPAWN_AREA_FRACTION = 0.005


def _pairwise_iou(prev: np.ndarray, prev_ids: np.ndarray,
                  curr: np.ndarray, curr_ids: np.ndarray) -> np.ndarray:
    """IoU matrix between previous-view global-id masks and current-view
    local-label masks, via a joint 2D histogram of the two label images."""
    prev_index = np.searchsorted(prev_ids, prev)
    curr_index = np.searchsorted(curr_ids, curr)
    valid = (prev > 0) & (curr > 0)
    joint = np.zeros((prev_ids.size, curr_ids.size), dtype=np.int64)
    np.add.at(joint, (prev_index[valid], curr_index[valid]), 1)
    area_prev = np.array([(prev == g).sum() for g in prev_ids], dtype=np.int64)
    area_curr = np.array([(curr == l).sum() for l in curr_ids], dtype=np.int64)
    union = area_prev[:, None] + area_curr[None, :] - joint
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, joint / union, 0.0)
    return iou


def associate_masks_greedy(per_view_masks: Sequence[np.ndarray],
                           iou_threshold: float = IOU_MATCH_THRESHOLD,
                           min_new_area: Optional[int] = None) -> List[np.ndarray]:
    """Relabel per-view masks into cross-view-consistent ids 1..K (0 kept as
    ignore). Matching is greedy one-to-one against the previous view only."""
    if len(per_view_masks) == 0:
        return []
    masks = [np.asarray(m) for m in per_view_masks]
    h, w = masks[0].shape
    for m in masks:
        if m.shape != (h, w):
            raise ValueError("all views must share a mask resolution")
        if m.min() < 0:
            raise ValueError("mask labels must be non-negative")
    area_floor = min_new_area if min_new_area is not None else \
        max(1, int(round(SPAWN_AREA_FRACTION * h * w)))

    out: List[np.ndarray] = []
    next_id = 1
    prev_global: Optional[np.ndarray] = None

    for view, mask in enumerate(masks):
        local_ids = np.unique(mask)
        local_ids = local_ids[local_ids > 0]
        assignment = {}

        if view == 0:
            for l in local_ids:
                assignment[int(l)] = next_id
                next_id += 1
        else:
            prev_ids = np.unique(prev_global)
            prev_ids = prev_ids[prev_ids > 0]
            if prev_ids.size and local_ids.size:
                iou = _pairwise_iou(prev_global, prev_ids, mask, local_ids)
                # descending IoU; ties broken by ascending (prev id, local id)
                order = np.argsort(-iou, axis=None, kind="stable")
                used_prev = set()
                for flat in order:
                    g_i, l_i = np.unravel_index(flat, iou.shape)
                    if iou[g_i, l_i] < iou_threshold:
                        break
                    g = int(prev_ids[g_i])
                    l = int(local_ids[l_i])
                    if g in used_prev or l in assignment:
                        continue
                    assignment[l] = g
                    used_prev.add(g)
            for l in local_ids:
                l = int(l)
                if l in assignment:
                    continue
                if (mask == l).sum() >= area_floor:
                    assignment[l] = next_id
                    next_id += 1
                else:
                    assignment[l] = 0  # too small to trust: ignore

        lut = np.zeros(int(mask.max()) + 1, dtype=np.uint16)
        for l, g in assignment.items():
            lut[l] = g
        out.append(lut[mask])
        prev_global = out[-1]

    # compact to a contiguous 1..K range (spawned ids may have been the only
    # appearance of a label that later maps were missing)
    used = np.unique(np.concatenate([np.unique(m) for m in out]))
    used = used[used > 0]
    remap = np.zeros(int(used.max()) + 1 if used.size else 1, dtype=np.uint16)
    remap[used] = np.arange(1, used.size + 1, dtype=np.uint16)
    return [remap[m] for m in out]
