"""Axis-aligned box arithmetic and the IoU predicate used by NMS suppression.

Boxes are continuous corner-format coordinates (x_min, y_min, x_max, y_max).
Zero-area boxes are rejected at construction so `iou` is total on its domain.
"""

import math
from dataclasses import dataclass
from typing import Tuple

from .errors import InvalidBoxError


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"Box coordinates must be finite, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"Box must have strictly positive area, got {coords}")

    @classmethod
    def from_center(cls, cx: float, cy: float, width: float, height: float) -> 'BoundingBox':
        return cls(cx - width / 2.0, cy - height / 2.0, cx + width / 2.0, cy + height / 2.0)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clipped(self, width: float, height: float) -> 'BoundingBox':
        """Clip to the image rectangle [0, width] x [0, height]."""
        return BoundingBox(
            max(0.0, self.x_min),
            max(0.0, self.y_min),
            min(float(width), self.x_max),
            min(float(height), self.y_max),
        )

    def translated(self, dx: float, dy: float) -> 'BoundingBox':
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def contains(self, other: 'BoundingBox') -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and other.x_max <= self.x_max and other.y_max <= self.y_max)

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvalidBoxError(f"Detection score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise InvalidBoxError(f"class_id must be non-negative, got {self.class_id}")


def area(b: BoundingBox) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    inter_w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter_h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if inter_w <= 0.0 or inter_h <= 0.0:
        return 0.0
    return inter_w * inter_h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1] and symmetric."""
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = area(a) + area(b) - inter
    return min(1.0, inter / union)
