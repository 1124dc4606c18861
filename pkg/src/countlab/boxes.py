"""Axis-aligned boxes on the unit canvas, stored as (x1, y1, x2, y2)."""

from __future__ import annotations

from typing import NamedTuple

__all__ = ["Box", "intersection_area", "iou"]


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def is_valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2

    def within_canvas(self, tol: float = 1e-9) -> bool:
        return (self.x1 >= -tol and self.y1 >= -tol
                and self.x2 <= 1.0 + tol and self.y2 <= 1.0 + tol)

    def intersect(self, other: "Box") -> "Box | None":
        """Intersection box, or None when the interiors do not overlap."""
        x1 = max(self.x1, other.x1)
        y1 = max(self.y1, other.y1)
        x2 = min(self.x2, other.x2)
        y2 = min(self.y2, other.y2)
        if x1 >= x2 or y1 >= y2:
            return None
        return Box(x1, y1, x2, y2)


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area() + b.area() - inter)
