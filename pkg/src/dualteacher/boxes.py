"""Box geometry shared by the detector and the evaluation code.

Boxes are (cx, cy, w, h) tuples in pixel units throughout the package.
"""

from __future__ import annotations

Box = tuple[float, float, float, float]


def to_corners(box: Box) -> tuple[float, float, float, float]:
    """(cx, cy, w, h) -> (x0, y0, x1, y1)."""
    cx, cy, w, h = box
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def from_corners(x0: float, y0: float, x1: float, y1: float) -> Box:
    return 0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0


def area(box: Box) -> float:
    return box[2] * box[3]


def iou(box_a: Box, box_b: Box) -> float:
    """Intersection-over-union of two positive-area boxes.

    Raises ValueError when either box has non-positive area.
    """
    if box_a[2] <= 0 or box_a[3] <= 0 or box_b[2] <= 0 or box_b[3] <= 0:
        raise ValueError(f"iou requires positive-area boxes, got {box_a} and {box_b}")
    ax0, ay0, ax1, ay1 = to_corners(box_a)
    bx0, by0, bx1, by1 = to_corners(box_b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = area(box_a) + area(box_b) - inter
    return inter / union
