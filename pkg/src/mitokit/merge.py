"""Lift patch detections into slide coordinates and remove cross-tile duplicates."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .core import Point2D, frame_transform
from .detect.protocol import DETECTION_LABEL, PatchDetection
from .patchset import PatchSpec


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class SlideDetection:
    slide_id: str
    center: Point2D
    score: float
    label: str = DETECTION_LABEL
    provenance: str = ""

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "x": self.center.x,
            "y": self.center.y,
            "score": self.score,
            "label": self.label,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SlideDetection:
        return cls(
            d["slide_id"],
            Point2D(float(d["x"]), float(d["y"])),
            float(d["score"]),
            d.get("label", DETECTION_LABEL),
            d.get("provenance", ""),
        )


def canonical_key(d: SlideDetection) -> tuple:
    """Total order: score descending, then x, y, provenance, slide id."""
    return (-d.score, d.center.x, d.center.y, d.provenance, d.slide_id)


def lift_to_slide(detections: Iterable[PatchDetection], specs: Mapping[str, PatchSpec]) -> list[SlideDetection]:
    out = []
    for d in detections:
        spec = specs.get(d.patch_id)
        if spec is None:
            raise MergeError(f"detection references unknown patch_id {d.patch_id!r}")
        out.append(SlideDetection(spec.slide_id, frame_transform(d.center, spec.origin, "to_slide"), d.score, d.label, d.patch_id))
    return out


def _far(a: SlideDetection, b: SlideDetection, r2: float) -> bool:
    dx = a.center.x - b.center.x
    dy = a.center.y - b.center.y
    return dx * dx + dy * dy > r2


def radius_suppress_naive(detections: Sequence[SlideDetection], radius: float) -> list[SlideDetection]:
    """Quadratic reference implementation of :func:`radius_suppress`."""
    if radius <= 0:
        raise MergeError(f"radius must be positive, got {radius}")
    r2 = radius * radius
    kept: list[SlideDetection] = []
    for d in sorted(detections, key=canonical_key):
        if all(k.slide_id != d.slide_id or _far(d, k, r2) for k in kept):
            kept.append(d)
    return kept


def radius_suppress(detections: Sequence[SlideDetection], radius: float) -> list[SlideDetection]:
    """Greedy score-ordered suppression: keep a detection iff it is farther than ``radius``
    from every detection already kept on the same slide.

    Neighbour lookups go through a uniform grid with cell size ``radius``.
    Two cells of slack are scanned on each side so float rounding in the cell
    index can never hide a neighbour; results equal the naive version exactly.
    """
    if radius <= 0:
        raise MergeError(f"radius must be positive, got {radius}")
    r2 = radius * radius
    grid: dict[tuple[str, int, int], list[SlideDetection]] = defaultdict(list)
    kept: list[SlideDetection] = []
    for d in sorted(detections, key=canonical_key):
        cx = math.floor(d.center.x / radius)
        cy = math.floor(d.center.y / radius)
        clear = True
        for gx in range(cx - 2, cx + 3):
            for gy in range(cy - 2, cy + 3):
                cell = grid.get((d.slide_id, gx, gy))
                if cell and not all(_far(d, k, r2) for k in cell):
                    clear = False
                    break
            if not clear:
                break
        if clear:
            kept.append(d)
            grid[(d.slide_id, cx, cy)].append(d)
    return kept


def suppress_per_slide(detections: Sequence[SlideDetection], radius: Mapping[str, float] | float) -> list[SlideDetection]:
    """Suppress with a per-slide radius (e.g. a micron radius converted with each slide's mpp)."""
    if not isinstance(radius, Mapping):
        return radius_suppress(detections, radius)
    groups: dict[str, list[SlideDetection]] = defaultdict(list)
    for d in detections:
        groups[d.slide_id].append(d)
    out = [k for sid in sorted(groups) for k in radius_suppress(groups[sid], radius[sid])]
    return sorted(out, key=canonical_key)


def write_slide_detections(path, detections: Iterable[SlideDetection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_dict(), separators=(",", ":")) + "\n")


def read_slide_detections(path) -> list[SlideDetection]:
    with open(path, encoding="utf-8") as fh:
        return [SlideDetection.from_dict(json.loads(line)) for line in fh if line.strip()]
