"""Geometry, coordinate frames and scalar metric helpers shared by every stage."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

Direction = Literal["to_slide", "to_patch"]


@dataclass(frozen=True, slots=True, order=True)
class Point2D:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def distance(self, other: Point2D) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True, slots=True)
class MppScale:
    """Physical resolution of a scan in micrometers per pixel."""

    microns_per_pixel: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.microns_per_pixel) and self.microns_per_pixel > 0):
            raise ValueError(f"microns_per_pixel must be positive and finite, got {self.microns_per_pixel}")


@dataclass(frozen=True, slots=True)
class Rect:
    """Axis-aligned rectangle ``[x, x + width) x [y, y + height)`` in pixels."""

    x: float
    y: float
    width: float
    height: float

    def __post_init__(self) -> None:
        for v in (self.x, self.y, self.width, self.height):
            if not math.isfinite(v):
                raise ValueError(f"non-finite rectangle {self}")
        if self.width < 0 or self.height < 0:
            raise ValueError(f"negative rectangle size {self.width}x{self.height}")

    @property
    def x1(self) -> float:
        return self.x + self.width

    @property
    def y1(self) -> float:
        return self.y + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point2D:
        return Point2D(self.x + self.width / 2, self.y + self.height / 2)

    def contains(self, p: Point2D) -> bool:
        """Half-open membership test."""
        return self.x <= p.x < self.x1 and self.y <= p.y < self.y1

    def within(self, width: float, height: float) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x1 <= width and self.y1 <= height


@dataclass(frozen=True, slots=True)
class MetricTriple:
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def frame_transform(p: Point2D, origin: Point2D, direction: Direction) -> Point2D:
    """Move a point between the slide frame and a patch frame anchored at ``origin``."""
    if direction == "to_slide":
        return Point2D(p.x + origin.x, p.y + origin.y)
    if direction == "to_patch":
        return Point2D(p.x - origin.x, p.y - origin.y)
    raise ValueError(f"unknown direction {direction!r}")


def microns_to_pixels(d: float, scale: MppScale) -> float:
    if d < 0:
        raise ValueError(f"distance must be non-negative, got {d}")
    return d / scale.microns_per_pixel


def _check_ratio(name: str, v: float) -> None:
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


def harmonic_f1(precision: float, recall: float) -> float:
    """F1 as the harmonic mean of precision and recall; 0 when both are 0."""
    _check_ratio("precision", precision)
    _check_ratio("recall", recall)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def metrics_from_counts(tp: int, fp: int, fn: int) -> MetricTriple:
    """Precision/recall/F1 from match counts.

    With no detections, precision is 1 if nothing was missed and 0 otherwise.
    With no ground truth, recall is 1.
    """
    if min(tp, fp, fn) < 0:
        raise ValueError(f"negative counts tp={tp} fp={fp} fn={fn}")
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    return MetricTriple(precision, recall, harmonic_f1(precision, recall))
