"""Seeded geometric augmentation with exact keypoint remapping.

Annotation coordinates are continuous: pixel ``i`` covers ``[i, i + 1)``, so a
horizontal flip maps ``x`` to ``w - x`` and a resize from ``s`` to ``t`` maps
``x`` to ``x * t / s``. Every sample is derived from ``(seed, sample_index)``
alone, so any trainer can regenerate it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage

from .core import Point2D
from .patchset import INDEX_NAME, PatchSpec, iter_patch_dir, load_image, save_png


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedPatch:
    """Pixel buffer plus patch-frame keypoints.

    ``ids`` tracks which input keypoint each row came from, so survivors of a
    crop can be related back to the original annotations.
    """

    image: np.ndarray
    points: np.ndarray
    labels: tuple[str, ...] = ()
    ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        labels = tuple(self.labels) or ("mitotic_figure",) * len(pts)
        if len(labels) != len(pts):
            raise AugmentError(f"{len(labels)} labels for {len(pts)} points")
        object.__setattr__(self, "labels", labels)
        ids = np.arange(len(pts)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @classmethod
    def from_spec(cls, image: np.ndarray, spec: PatchSpec) -> AnnotatedPatch:
        pts = np.array([[p.x, p.y] for _, p in spec.local_annotations], dtype=np.float64).reshape(-1, 2)
        return cls(image, pts, tuple(label for label, _ in spec.local_annotations))

    def local_annotations(self) -> tuple[tuple[str, Point2D], ...]:
        return tuple((label, Point2D(float(x), float(y))) for label, (x, y) in zip(self.labels, self.points))

    def _select(self, keep: np.ndarray, image: np.ndarray, points: np.ndarray) -> AnnotatedPatch:
        return AnnotatedPatch(image, points[keep], tuple(np.array(self.labels, dtype=object)[keep]), self.ids[keep])


def flip(patch: AnnotatedPatch, axis: Literal["horizontal", "vertical"]) -> AnnotatedPatch:
    pts = patch.points.copy()
    if axis == "horizontal":
        image = patch.image[:, ::-1]
        pts[:, 0] = patch.width - pts[:, 0]
    elif axis == "vertical":
        image = patch.image[::-1]
        pts[:, 1] = patch.height - pts[:, 1]
    else:
        raise AugmentError(f"unknown flip axis {axis!r}")
    return AnnotatedPatch(np.ascontiguousarray(image), pts, patch.labels, patch.ids)


def _bilinear(image: np.ndarray, target: int) -> np.ndarray:
    h, w = image.shape[:2]
    zoom = (target / h, target / w) + (1.0,) * (image.ndim - 2)
    out = ndimage.zoom(image.astype(np.float64), zoom, order=1, mode="nearest", grid_mode=True)
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(image.dtype)


def resize(patch: AnnotatedPatch, target: int) -> AnnotatedPatch:
    """Bilinear resample of a square patch to ``target x target``; keypoints scale by ``target / size``."""
    if patch.width != patch.height:
        raise AugmentError(f"resize expects a square patch, got {patch.width}x{patch.height}")
    if target <= 0:
        raise AugmentError(f"target size must be positive, got {target}")
    if target == patch.width:
        return patch
    image = _bilinear(patch.image, target)
    return AnnotatedPatch(image, patch.points * target / patch.width, patch.labels, patch.ids)


def crop(patch: AnnotatedPatch, x: int, y: int, out: int) -> AnnotatedPatch:
    """Fixed ``out x out`` window at ``(x, y)``; keypoints leaving ``[0, out)^2`` are dropped."""
    if x < 0 or y < 0 or x + out > patch.width or y + out > patch.height:
        raise AugmentError(f"crop ({x}, {y}, {out}) outside {patch.width}x{patch.height} patch")
    pts = patch.points - np.array([x, y], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < out) & (pts[:, 1] >= 0) & (pts[:, 1] < out)
    return patch._select(keep, np.ascontiguousarray(patch.image[y : y + out, x : x + out]), pts)


def random_size_crop(
    patch: AnnotatedPatch, out: int = 384, seed: int | np.random.Generator = 0
) -> tuple[AnnotatedPatch, tuple[int, int]]:
    """Crop a fixed ``out``-pixel window at a seeded uniform origin; returns the patch and that origin."""
    if patch.width < out or patch.height < out:
        raise AugmentError(f"patch {patch.width}x{patch.height} is smaller than crop {out}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = int(rng.integers(0, patch.width - out + 1))
    y = int(rng.integers(0, patch.height - out + 1))
    return crop(patch, x, y, out), (x, y)


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    resize_choices: tuple[int, ...] = (400, 500, 600)
    crop_size: int = 384
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "resize_choices", tuple(int(v) for v in self.resize_choices))
        for name in ("hflip_prob", "vflip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AugmentError(f"{name} must lie in [0, 1], got {v}")
        if not self.resize_choices:
            raise AugmentError("resize_choices must not be empty")
        if self.crop_size <= 0 or self.crop_size > min(self.resize_choices):
            raise AugmentError(f"crop_size {self.crop_size} must be positive and <= min(resize_choices)")


@dataclass(frozen=True)
class TransformRecord:
    """The concrete transform chain applied to one sample."""

    source_size: int
    hflip: bool
    vflip: bool
    resize_to: int
    crop_origin: tuple[int, int]
    crop_size: int

    def forward(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
        if self.hflip:
            p[:, 0] = self.source_size - p[:, 0]
        if self.vflip:
            p[:, 1] = self.source_size - p[:, 1]
        p = p * self.resize_to / self.source_size
        return p - np.asarray(self.crop_origin, dtype=np.float64)

    def inverse(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2) + np.asarray(self.crop_origin, dtype=np.float64)
        p = p * self.source_size / self.resize_to
        if self.vflip:
            p[:, 1] = self.source_size - p[:, 1]
        if self.hflip:
            p[:, 0] = self.source_size - p[:, 0]
        return p

    def as_dict(self) -> dict:
        return {
            "source_size": self.source_size,
            "hflip": self.hflip,
            "vflip": self.vflip,
            "resize_to": self.resize_to,
            "crop_origin": list(self.crop_origin),
            "crop_size": self.crop_size,
        }


@dataclass(frozen=True)
class AugmentedSample:
    patch: AnnotatedPatch
    record: TransformRecord


def sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, sample_index])


def sample_transform(config: AugmentConfig, source_size: int, sample_index: int) -> TransformRecord:
    """Draw the transform chain for one sample from ``(config.seed, sample_index)``."""
    rng = sample_rng(config.seed, sample_index)
    hflip = bool(rng.random() < config.hflip_prob)
    vflip = bool(rng.random() < config.vflip_prob)
    target = config.resize_choices[int(rng.integers(len(config.resize_choices)))]
    if target < config.crop_size:
        raise AugmentError(f"resize target {target} is smaller than crop {config.crop_size}")
    x = int(rng.integers(0, target - config.crop_size + 1))
    y = int(rng.integers(0, target - config.crop_size + 1))
    return TransformRecord(source_size, hflip, vflip, target, (x, y), config.crop_size)


def execute(patch: AnnotatedPatch, record: TransformRecord) -> AnnotatedPatch:
    if patch.width != record.source_size or patch.height != record.source_size:
        raise AugmentError(f"record expects a {record.source_size} px square patch, got {patch.width}x{patch.height}")
    if record.hflip:
        patch = flip(patch, "horizontal")
    if record.vflip:
        patch = flip(patch, "vertical")
    patch = resize(patch, record.resize_to)
    return crop(patch, *record.crop_origin, record.crop_size)


def apply_pipeline(patch: AnnotatedPatch, config: AugmentConfig, sample_index: int) -> AugmentedSample:
    """Horizontal flip, vertical flip, resize to a random choice, then a fixed-size random crop."""
    if patch.width != patch.height:
        raise AugmentError(f"pipeline expects a square patch, got {patch.width}x{patch.height}")
    record = sample_transform(config, patch.width, sample_index)
    return AugmentedSample(execute(patch, record), record)


def augment_patch_set(src_dir: str | Path, dst_dir: str | Path, config: AugmentConfig, copies: int = 1) -> list[PatchSpec]:
    """Write ``copies`` augmented samples per input patch in the patch-directory format.

    Sample ``k`` of the ``i``-th indexed patch uses ``sample_index = i * copies + k``.
    """
    dst = Path(dst_dir)
    dst.mkdir(parents=True, exist_ok=True)
    specs: list[PatchSpec] = []
    lines: list[str] = []
    for i, (spec, png) in enumerate(iter_patch_dir(src_dir)):
        base = AnnotatedPatch.from_spec(load_image(png), spec)
        for k in range(copies):
            idx = i * copies + k
            sample = apply_pipeline(base, config, idx)
            out = PatchSpec(
                patch_id=f"{spec.patch_id}-aug{k}",
                slide_id=spec.slide_id,
                origin=spec.origin,
                width=sample.patch.width,
                height=sample.patch.height,
                purpose=spec.purpose,
                local_annotations=sample.patch.local_annotations(),
            )
            save_png(dst / f"{out.patch_id}.png", sample.patch.image)
            doc = out.to_dict()
            doc.update(source_patch_id=spec.patch_id, sample_index=idx, transform=sample.record.as_dict())
            lines.append(json.dumps(doc, sort_keys=True, separators=(",", ":")))
            specs.append(out)
    (dst / INDEX_NAME).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return specs


def points_of(annotations: Sequence[tuple[str, Point2D]]) -> np.ndarray:
    return np.array([[p.x, p.y] for _, p in annotations], dtype=np.float64).reshape(-1, 2)
