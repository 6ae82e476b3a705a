"""Cross-view instance-id association tests."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupsplat.associate import (
    IOU_MATCH_THRESHOLD,
    SPAWN_AREA_FRACTION,
    associate_masks_greedy,
)


def square(h, w, r0, c0, size, label, base=None):
    mask = np.zeros((h, w), dtype=np.int64) if base is None else base
    mask[r0:r0 + size, c0:c0 + size] = label
    return mask


def iou_of(a, b, ida, idb):
    inter = ((a == ida) & (b == idb)).sum()
    union = ((a == ida) | (b == idb)).sum()
    return inter / union


class TestAssociateMasksGreedy:
    def test_empty_input(self):
        assert associate_masks_greedy([]) == []

    def test_first_view_labels_become_ascending_ids(self):
        mask = square(10, 10, 0, 0, 3, 7)
        mask = square(10, 10, 6, 6, 3, 3, base=mask)
        (out,) = associate_masks_greedy([mask])
        # local 3 -> 1, local 7 -> 2 (ascending local order)
        assert set(np.unique(out)) == {0, 1, 2}
        assert np.all(out[mask == 3] == 1)
        assert np.all(out[mask == 7] == 2)
        assert np.all(out[mask == 0] == 0)

    def test_strong_overlap_keeps_the_id(self):
        v0 = square(20, 20, 2, 2, 8, 5)
        v1 = square(20, 20, 2, 3, 8, 9)          # shifted one column
        assert iou_of(v0, v1, 5, 9) > 0.7
        out = associate_masks_greedy([v0, v1])
        assert np.all(out[0][v0 == 5] == 1)
        assert np.all(out[1][v1 == 9] == 1)

    def test_default_threshold_value(self):
        assert IOU_MATCH_THRESHOLD == 0.3
        assert SPAWN_AREA_FRACTION == 0.005

    def test_threshold_is_honored(self):
        # overlap 2, areas 5/5 -> IoU 2/8 = 0.25: below the default bar,
        # above a custom 0.2 bar
        v0 = np.zeros((10, 10), dtype=np.int64)
        v0[0, 0:5] = 4
        v1 = np.zeros((10, 10), dtype=np.int64)
        v1[0, 3:8] = 6
        assert iou_of(v0, v1, 4, 6) == pytest.approx(0.25)
        out = associate_masks_greedy([v0, v1])
        assert np.all(out[1][v1 == 6] == 2)       # spawned a fresh id
        out = associate_masks_greedy([v0, v1], iou_threshold=0.2)
        assert np.all(out[1][v1 == 6] == 1)       # matched

    def test_disjoint_region_spawns_next_id(self):
        v0 = square(20, 20, 0, 0, 6, 1)
        v1 = square(20, 20, 0, 0, 6, 2)           # same object, new label
        v1 = square(20, 20, 12, 12, 6, 1, base=v1)  # brand-new object
        out = associate_masks_greedy([v0, v1])
        assert np.all(out[1][v1 == 2] == 1)
        assert np.all(out[1][v1 == 1] == 2)

    def test_small_unmatched_region_is_dropped(self):
        # floor = round(0.005 * 100 * 100) = 50 pixels
        v0 = square(100, 100, 0, 0, 20, 1)
        v1 = square(100, 100, 0, 0, 20, 1)
        v1 = square(100, 100, 50, 50, 3, 2, base=v1)   # 9 px: noise
        out = associate_masks_greedy([v0, v1])
        assert np.all(out[1][v1 == 2] == 0)
        out = associate_masks_greedy([v0, v1], min_new_area=1)
        assert np.all(out[1][v1 == 2] == 2)

    def test_five_views_with_shuffled_labels_recover_exactly(self):
        # two squares drifting 2 px per view: consecutive IoU = 48/80 = 0.6
        h = w = 40
        truth, shuffled = [], []
        swaps = [(1, 2), (2, 1), (5, 9), (3, 1), (2, 7)]
        for view, (la, lb) in enumerate(swaps):
            gt = square(h, w, 4, 2 + 2 * view, 8, 1)
            gt = square(h, w, 24, 30 - 2 * view, 8, 2, base=gt)
            truth.append(gt)
            local = np.zeros_like(gt)
            local[gt == 1] = la
            local[gt == 2] = lb
            shuffled.append(local)
        for k in range(4):
            assert iou_of(truth[k], truth[k + 1], 1, 1) >= 0.5
            assert iou_of(truth[k], truth[k + 1], 2, 2) >= 0.5
        out = associate_masks_greedy(shuffled)
        # view 0 had local (1, 2) = (object A, object B) so ids line up
        for got, gt in zip(out, truth):
            np.testing.assert_array_equal(got, gt)

    def test_greedy_takes_the_strongest_overlap_first(self):
        v0 = square(30, 30, 0, 0, 10, 1)
        v1 = square(30, 30, 0, 2, 10, 4)    # IoU 80/120
        v1 = square(30, 30, 10, 0, 6, 2, base=v1)
        v1[8:10, 0:6] = 2                    # IoU 12/(100+48-12) vs prev
        assert iou_of(v0, v1, 1, 4) > iou_of(v0, v1, 1, 2) > 0.05
        out = associate_masks_greedy([v0, v1], iou_threshold=0.05)
        assert np.all(out[1][v1 == 4] == 1)
        assert np.all(out[1][v1 == 2] == 2)

    def test_equal_overlaps_resolve_to_the_smaller_local_label(self):
        v0 = square(10, 10, 0, 0, 4, 1)
        v1 = np.zeros((10, 10), dtype=np.int64)
        v1[0:2, 0:4] = 2                     # IoU 8/16 = 0.5
        v1[2:4, 0:4] = 1                     # IoU 8/16 = 0.5, smaller label
        out = associate_masks_greedy([v0, v1], min_new_area=1)
        assert np.all(out[1][v1 == 1] == 1)
        assert np.all(out[1][v1 == 2] == 2)

    def test_resolution_mismatch_rejected(self):
        with pytest.raises(ValueError, match="share a mask resolution"):
            associate_masks_greedy([np.zeros((4, 4), int),
                                    np.zeros((4, 5), int)])

    def test_negative_labels_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            associate_masks_greedy([np.full((4, 4), -1)])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_output_ids_are_contiguous_and_zero_is_preserved(self, seed):
        rng = np.random.default_rng(seed)
        views = []
        for _ in range(rng.integers(1, 5)):
            mask = np.zeros((12, 12), dtype=np.int64)
            for label in range(1, rng.integers(1, 5)):
                r, c = rng.integers(0, 8, size=2)
                size = rng.integers(1, 5)
                mask[r:r + size, c:c + size] = label
            views.append(mask)
        out = associate_masks_greedy(views, min_new_area=1)
        ids = np.unique(np.concatenate([m.ravel() for m in out]))
        ids = ids[ids > 0]
        np.testing.assert_array_equal(ids, np.arange(1, ids.size + 1))
        for got, src in zip(out, views):
            assert np.all(got[src == 0] == 0)
