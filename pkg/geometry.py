"""
Box arithmetic and box-to-patch-grid projection.
"""

from typing import Iterable, Sequence

import numpy as np

from exceptions import GeometryError
from models import Box, PatchAttentionMap

POSITIONS = ("on the left", "ahead", "on the right")


def _check(box) -> Box:
    if not isinstance(box, Box):
        try:
            box = Box.from_list(list(box))
        except (TypeError, ValueError) as e:
            raise GeometryError(f"Malformed box {box!r}: {str(e)}") from e
    return box


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """
    Intersection over union of two boxes.

    Args:
        a: First box
        b: Second box

    Returns:
        area(a & b) / area(a | b), 0.0 when the union is empty
    """
    a, b = _check(a), _check(b)
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes: Sequence[Box], target: Box) -> np.ndarray:
    """IoU of every box against one target, in box order"""
    return np.array([iou(box, target) for box in boxes], dtype=np.float64)


def check_patch_grid(height: int, width: int, patch_size: int):
    if patch_size <= 0 or height % patch_size or width % patch_size:
        raise GeometryError(f"Frame {height}x{width} is not divisible by patch size {patch_size}")


def project_to_patch_map(boxes: Iterable[Box], height: int, width: int, patch_size: int) -> PatchAttentionMap:
    """
    Mark every patch whose area overlaps some box with positive area.

    A box that only touches a patch edge leaves that patch unset.

    Args:
        boxes: Boxes clipped to the frame
        height: Frame height in pixels
        width: Frame width in pixels
        patch_size: Side of the square patches

    Returns:
        PatchAttentionMap of shape (height / patch_size, width / patch_size)
    """
    check_patch_grid(height, width, patch_size)
    rows, cols = height // patch_size, width // patch_size
    grid = np.zeros((rows, cols), dtype=np.uint8)
    edges_lo = np.arange(cols) * patch_size
    row_lo = np.arange(rows) * patch_size

    for box in boxes:
        box = _check(box)
        overlap_x = np.minimum(box.x_max, edges_lo + patch_size) - np.maximum(box.x_min, edges_lo)
        overlap_y = np.minimum(box.y_max, row_lo + patch_size) - np.maximum(box.y_min, row_lo)
        grid |= np.outer(overlap_y > 0, overlap_x > 0).astype(np.uint8)

    return PatchAttentionMap(grid=grid, patch_size=patch_size, height=height, width=width)


def position_label(box: Box, width: float) -> str:
    """Horizontal third of the frame holding the box center"""
    center_x, _ = _check(box).center
    if center_x < width / 3.0:
        return POSITIONS[0]
    if center_x < 2.0 * width / 3.0:
        return POSITIONS[1]
    return POSITIONS[2]


def distance_to_region(point, region: Box) -> float:
    """Euclidean distance from a point to a box, 0 inside"""
    x, y = point
    dx = max(region.x_min - x, 0.0, x - region.x_max)
    dy = max(region.y_min - y, 0.0, y - region.y_max)
    return float(np.hypot(dx, dy))
