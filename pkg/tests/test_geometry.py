'''
Tests for box arithmetic and patch-grid projection.
'''

import numpy as np
import pytest

from exceptions import GeometryError
from geometry import iou, iou_matrix, position_label, project_to_patch_map
from models import Box, PatchAttentionMap
from tests.oracles import brute_patch_map, raster_iou


def random_box(rng, extent=64):
    '''Box with corners on the half-pixel lattice, possibly degenerate.'''
    x0, x1 = sorted(rng.integers(0, 2 * extent + 1, size=2) / 2.0)
    y0, y1 = sorted(rng.integers(0, 2 * extent + 1, size=2) / 2.0)
    return Box(float(x0), float(y0), float(x1), float(y1))


# -------------------------------------------------------------------------------------------------
# IoU
# -------------------------------------------------------------------------------------------------

class TestIoU:
    '''Intersection over union.'''

    def test_identical_boxes(self):
        assert iou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)) == 1.0

    def test_disjoint_boxes(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_partial_overlap(self):
        assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_empty_union_is_zero(self):
        assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0

    def test_accepts_lists(self):
        assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1.0 / 7.0)

    def test_malformed_box_raises(self):
        with pytest.raises(GeometryError):
            iou([0, 0, 1], [0, 0, 1, 1])
        with pytest.raises(GeometryError):
            Box(2, 0, 1, 1)
        with pytest.raises(GeometryError):
            Box(0, 0, float("nan"), 1)

    def test_matches_raster_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            assert abs(iou(a, b) - raster_iou(a.to_list(), b.to_list())) <= 1e-6

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            a, b = random_box(rng), random_box(rng)
            value = iou(a, b)
            assert value == iou(b, a)
            assert 0.0 <= value <= 1.0
            if a.area > 0:
                assert iou(a, a) == 1.0

    def test_iou_matrix_keeps_order(self):
        boxes = [Box(0, 0, 2, 2), Box(10, 10, 12, 12), Box(1, 1, 3, 3)]
        np.testing.assert_allclose(iou_matrix(boxes, Box(0, 0, 2, 2)), [1.0, 0.0, 1.0 / 7.0])


# -------------------------------------------------------------------------------------------------
# Patch projection
# -------------------------------------------------------------------------------------------------

class TestProjectToPatchMap:
    '''Box list -> binary patch grid.'''

    def test_single_patch_box(self):
        grid = project_to_patch_map([Box(0, 0, 16, 16)], 64, 64, 16).grid
        expected = np.zeros((4, 4), dtype=np.uint8)
        expected[0, 0] = 1
        np.testing.assert_array_equal(grid, expected)

    def test_full_frame_box(self):
        patch_map = project_to_patch_map([Box(0, 0, 64, 64)], 64, 64, 16)
        assert patch_map.is_all_ones()
        assert patch_map.grid.sum() == 16

    def test_box_spanning_six_patches(self):
        grid = project_to_patch_map([Box(8, 8, 40, 24)], 64, 64, 16).grid
        assert {tuple(rc) for rc in np.argwhere(grid)} == {(r, c) for r in (0, 1) for c in (0, 1, 2)}

    def test_edge_touch_does_not_mark(self):
        grid = project_to_patch_map([Box(16, 0, 32, 16)], 64, 64, 16).grid
        assert grid[0, 0] == 0 and grid[0, 2] == 0 and grid[0, 1] == 1

    def test_empty_list_gives_zero_map(self):
        assert project_to_patch_map([], 64, 64, 8).is_all_zeros()

    def test_non_divisible_dims_raise(self):
        with pytest.raises(GeometryError):
            project_to_patch_map([Box(0, 0, 1, 1)], 64, 60, 8)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            patch = int(rng.choice([4, 8, 16]))
            boxes = [random_box(rng, 32) for _ in range(int(rng.integers(0, 4)))]
            fast = project_to_patch_map(boxes, 32, 32, patch).grid
            slow = brute_patch_map([b.to_list() for b in boxes], 32, 32, patch)
            np.testing.assert_array_equal(fast, slow)

    def test_adding_a_box_never_clears(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            boxes = [random_box(rng) for _ in range(3)]
            before = project_to_patch_map(boxes[:2], 64, 64, 8).grid
            after = project_to_patch_map(boxes, 64, 64, 8).grid
            assert np.all(after >= before)

    def test_full_map_helper(self):
        patch_map = PatchAttentionMap.full(64, 64, 8)
        assert (patch_map.rows, patch_map.cols) == (8, 8)
        assert patch_map.flat().shape == (64,)


# -------------------------------------------------------------------------------------------------
# Position label
# -------------------------------------------------------------------------------------------------

class TestPositionLabel:
    '''Horizontal thirds by box center.'''

    def test_center_is_ahead(self):
        assert position_label(Box(28, 0, 36, 8), 64) == "ahead"

    def test_left_edge(self):
        assert position_label(Box(0, 0, 0, 4), 64) == "on the left"

    def test_third_boundary_is_ahead(self):
        assert position_label(Box(0, 0, 2 * 64 / 3, 4), 64) == "ahead"

    def test_right(self):
        assert position_label(Box(56, 0, 64, 8), 64) == "on the right"
