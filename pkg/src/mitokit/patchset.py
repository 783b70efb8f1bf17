"""Patch planning (positives, random negatives, hard negatives, inference tiles) and rendering.

A patch set on disk is a directory holding one PNG per patch, named
``<patch_id>.png``, and an ``index.ndjson`` file with one PatchSpec per line.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Literal, Mapping, Sequence

import numpy as np
from PIL import Image

from .core import Point2D, Rect, frame_transform
from .manifest import MITOTIC_FIGURE, AnnotationRecord, DatasetManifest, SlideRecord

Purpose = Literal["positive", "negative", "hard_negative", "tile"]
PURPOSES = ("positive", "negative", "hard_negative", "tile")
INDEX_NAME = "index.ndjson"

LocalAnnotation = tuple[str, Point2D]


class PatchError(ValueError):
    pass


class PlanningWarning(UserWarning):
    """Emitted when a planner returns fewer patches than requested."""


@dataclass(frozen=True)
class PatchSpec:
    patch_id: str
    slide_id: str
    origin: Point2D
    width: int
    height: int
    purpose: str
    local_annotations: tuple[LocalAnnotation, ...] = ()

    def __post_init__(self) -> None:
        if self.purpose not in PURPOSES:
            raise PatchError(f"unknown purpose {self.purpose!r}")
        if self.width <= 0 or self.height <= 0:
            raise PatchError(f"patch {self.patch_id}: size must be positive")
        if self.origin.x < 0 or self.origin.y < 0:
            raise PatchError(f"patch {self.patch_id}: negative origin")
        if self.origin.x != int(self.origin.x) or self.origin.y != int(self.origin.y):
            raise PatchError(f"patch {self.patch_id}: origin must be integer-valued")
        for label, p in self.local_annotations:
            if not (0 <= p.x < self.width and 0 <= p.y < self.height):
                raise PatchError(f"patch {self.patch_id}: local annotation {label} at ({p.x}, {p.y}) outside patch")

    @property
    def rect(self) -> Rect:
        return Rect(self.origin.x, self.origin.y, self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "slide_id": self.slide_id,
            "x": int(self.origin.x),
            "y": int(self.origin.y),
            "width": self.width,
            "height": self.height,
            "purpose": self.purpose,
            "annotations": [{"label": label, "x": p.x, "y": p.y} for label, p in self.local_annotations],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> PatchSpec:
        return cls(
            patch_id=d["patch_id"],
            slide_id=d["slide_id"],
            origin=Point2D(float(d["x"]), float(d["y"])),
            width=int(d["width"]),
            height=int(d["height"]),
            purpose=d["purpose"],
            local_annotations=tuple((a["label"], Point2D(float(a["x"]), float(a["y"]))) for a in d.get("annotations", ())),
        )


def make_patch_id(slide_id: str, x: int, y: int, width: int, height: int, purpose: str) -> str:
    """Content-derived, filename-safe patch id."""
    digest = hashlib.sha1(f"{slide_id}|{x}|{y}|{width}|{height}|{purpose}".encode("utf-8")).hexdigest()
    return f"{purpose}-{digest[:16]}"


def make_spec(
    slide_id: str,
    x: int,
    y: int,
    width: int,
    height: int,
    purpose: str,
    annotations: Iterable[AnnotationRecord] = (),
) -> PatchSpec:
    window = Rect(x, y, width, height)
    origin = Point2D(float(x), float(y))
    local = tuple(
        (a.label, frame_transform(a.center, origin, "to_patch")) for a in annotations if window.contains(a.center)
    )
    return PatchSpec(make_patch_id(slide_id, x, y, width, height, purpose), slide_id, origin, width, height, purpose, local)


def _rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(key.encode("utf-8"))])


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(v, hi))


def _dedupe(specs: Iterable[PatchSpec]) -> list[PatchSpec]:
    seen: dict[str, PatchSpec] = {}
    for s in specs:
        seen.setdefault(s.patch_id, s)
    return list(seen.values())


def plan_positive_patches(
    manifest: DatasetManifest, size: int = 380, jitter_max: int = 50, seed: int = 0
) -> list[PatchSpec]:
    """One window per mitotic figure, centred on it with seeded integer jitter, then clamped into the slide.

    Windows that coincide exactly (same slide and origin) are emitted once.
    """
    slides = manifest.slide_index()
    specs: list[PatchSpec] = []
    skipped = 0
    for a in sorted(manifest.annotations, key=lambda a: a.ann_id):
        if a.label != MITOTIC_FIGURE:
            continue
        s = slides[a.slide_id]
        if s.width < size or s.height < size:
            skipped += 1
            continue
        jx, jy = _rng(seed, a.ann_id).integers(-jitter_max, jitter_max + 1, size=2) if jitter_max > 0 else (0, 0)
        x = _clamp(round(a.center.x - size / 2) + int(jx), 0, s.width - size)
        y = _clamp(round(a.center.y - size / 2) + int(jy), 0, s.height - size)
        specs.append(make_spec(s.slide_id, x, y, size, size, "positive"))
    if skipped:
        warnings.warn(f"skipped {skipped} annotation(s) on slides smaller than {size} px", PlanningWarning, stacklevel=2)
    return attach_annotations(_dedupe(specs), manifest.annotations)


def plan_negative_patches(
    manifest: DatasetManifest,
    size: int = 380,
    count: int = 0,
    min_distance: float = 0.0,
    seed: int = 0,
    max_attempts: int | None = None,
) -> list[PatchSpec]:
    """Rejection-sample windows whose centers keep ``min_distance`` from every mitotic figure."""
    if count < 0:
        raise PatchError(f"count must be non-negative, got {count}")
    if count == 0:
        return []
    eligible = sorted((s for s in manifest.slides if s.width >= size and s.height >= size), key=lambda s: s.slide_id)
    if not eligible:
        warnings.warn(f"no slide is at least {size} px; no negatives sampled", PlanningWarning, stacklevel=2)
        return []
    by_slide = manifest.annotations_by_slide()
    mf = {
        s.slide_id: np.array([[a.center.x, a.center.y] for a in by_slide[s.slide_id] if a.label == MITOTIC_FIGURE]).reshape(-1, 2)
        for s in eligible
    }
    budget = max_attempts if max_attempts is not None else 100 * count
    rng = np.random.default_rng(seed)
    out: dict[str, PatchSpec] = {}
    attempts = 0
    while len(out) < count and attempts < budget:
        attempts += 1
        s = eligible[int(rng.integers(len(eligible)))]
        x = int(rng.integers(0, s.width - size + 1))
        y = int(rng.integers(0, s.height - size + 1))
        pts = mf[s.slide_id]
        if len(pts):
            d = np.hypot(pts[:, 0] - (x + size / 2), pts[:, 1] - (y + size / 2))
            if d.min() < min_distance:
                continue
        spec = make_spec(s.slide_id, x, y, size, size, "negative", by_slide[s.slide_id])
        out.setdefault(spec.patch_id, spec)
    if len(out) < count:
        warnings.warn(
            f"attempt budget ({budget}) exhausted: sampled {len(out)} of {count} negative patches",
            PlanningWarning,
            stacklevel=2,
        )
    return list(out.values())


def mine_hard_negative_patches(
    manifest: DatasetManifest, n: int = 5000, size: int = 360, seed: int = 0
) -> list[PatchSpec]:
    """Centre crops of ``size`` px from necrosis regions; a seeded sample of ``n`` when more qualify."""
    regions = sorted((r for r in manifest.regions if r.region_label == "necrosis"), key=lambda r: r.region_id)
    if not regions:
        warnings.warn("manifest has no necrosis regions", PlanningWarning, stacklevel=2)
        return []
    qualifying = [r for r in regions if r.bounds.width >= size and r.bounds.height >= size]
    if len(qualifying) < n:
        warnings.warn(
            f"only {len(qualifying)} of {len(regions)} necrosis regions fit a {size} px crop; requested {n}",
            PlanningWarning,
            stacklevel=2,
        )
        chosen = qualifying
    else:
        idx = np.sort(np.random.default_rng(seed).choice(len(qualifying), size=n, replace=False))
        chosen = [qualifying[i] for i in idx]

    specs = []
    for r in chosen:
        b = r.bounds
        x = math.floor(b.x + (b.width - size) / 2)
        y = math.floor(b.y + (b.height - size) / 2)
        specs.append(make_spec(r.slide_id, x, y, size, size, "hard_negative"))
    return attach_annotations(_dedupe(specs), manifest.annotations)


# -- inference tiling --------------------------------------------------------


@dataclass(frozen=True)
class TilePlan:
    roi: Rect
    tile_size: int
    overlap: int
    tiles: tuple[PatchSpec, ...] = field(default=())


def axis_origins(start: int, length: int, tile_size: int, overlap: int) -> list[int]:
    """Stride origins along one axis; a final origin clamped to ``end - tile_size`` closes any gap."""
    if not 0 <= overlap < tile_size:
        raise PatchError(f"overlap must lie in [0, {tile_size}), got {overlap}")
    if length < tile_size:
        raise PatchError(f"ROI extent {length} is smaller than tile size {tile_size}")
    end = start + length
    stride = tile_size - overlap
    origins = list(range(start, end - tile_size + 1, stride))
    if origins[-1] + tile_size < end:
        origins.append(end - tile_size)
    return origins


def plan_tile_grid(roi: Rect, tile_size: int = 380, overlap: int = 76, slide_id: str = "roi") -> TilePlan:
    if any(v != int(v) for v in (roi.x, roi.y, roi.width, roi.height)):
        raise PatchError("tile grid ROI must be integer-valued")
    xs = axis_origins(int(roi.x), int(roi.width), tile_size, overlap)
    ys = axis_origins(int(roi.y), int(roi.height), tile_size, overlap)
    tiles = tuple(make_spec(slide_id, x, y, tile_size, tile_size, "tile") for y in ys for x in xs)
    return TilePlan(roi, tile_size, overlap, tiles)


def plan_slide_tiles(
    manifest: DatasetManifest, tile_size: int = 380, overlap: int = 76, with_annotations: bool = True
) -> list[PatchSpec]:
    """Tile every slide of the manifest; tiles carry local ground truth when ``with_annotations``."""
    by_slide = manifest.annotations_by_slide()
    specs: list[PatchSpec] = []
    for s in manifest.slides:
        plan = plan_tile_grid(Rect(0, 0, s.width, s.height), tile_size, overlap, s.slide_id)
        if with_annotations:
            specs.extend(attach_annotations(plan.tiles, by_slide[s.slide_id]))
        else:
            specs.extend(plan.tiles)
    return specs


def attach_annotations(specs: Iterable[PatchSpec], annotations: Sequence[AnnotationRecord]) -> list[PatchSpec]:
    """Rebuild specs with the local annotations that fall inside each window."""
    by_slide: dict[str, list[AnnotationRecord]] = {}
    for a in annotations:
        by_slide.setdefault(a.slide_id, []).append(a)
    coords = {k: np.array([[a.center.x, a.center.y] for a in v]) for k, v in by_slide.items()}
    out = []
    for spec in specs:
        rel: list[AnnotationRecord] = []
        pts = coords.get(spec.slide_id)
        if pts is not None:
            x, y = spec.origin.x, spec.origin.y
            inside = (pts[:, 0] >= x) & (pts[:, 0] < x + spec.width) & (pts[:, 1] >= y) & (pts[:, 1] < y + spec.height)
            rel = [by_slide[spec.slide_id][i] for i in np.flatnonzero(inside)]
        out.append(make_spec(spec.slide_id, int(spec.origin.x), int(spec.origin.y), spec.width, spec.height, spec.purpose, rel))
    return out


# -- rendering and persistence -----------------------------------------------


def render_patch(
    image: np.ndarray, spec: PatchSpec, annotations: Iterable[LocalAnnotation] = ()
) -> tuple[np.ndarray, list[LocalAnnotation]]:
    """Crop ``spec`` out of a slide-sized pixel buffer and move slide-frame annotations into it."""
    h, w = image.shape[:2]
    x, y = int(spec.origin.x), int(spec.origin.y)
    if not spec.rect.within(w, h):
        raise PatchError(f"patch {spec.patch_id} ({x}, {y}, {spec.width}x{spec.height}) exceeds image {w}x{h}")
    crop = image[y : y + spec.height, x : x + spec.width].copy()
    local = []
    for label, p in annotations:
        q = frame_transform(p, spec.origin, "to_patch")
        if 0 <= q.x < spec.width and 0 <= q.y < spec.height:
            local.append((label, q))
    return crop, local


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG or single-page TIFF into an ``H x W [x C]`` array."""
    with Image.open(path) as im:
        return np.asarray(im)


def save_png(path: str | Path, pixels: np.ndarray) -> None:
    Image.fromarray(pixels).save(path, format="PNG")


def write_index(path: str | Path, specs: Iterable[PatchSpec]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_index(path: str | Path) -> list[PatchSpec]:
    with open(path, encoding="utf-8") as fh:
        return [PatchSpec.from_dict(json.loads(line)) for line in fh if line.strip()]


def iter_patch_dir(patch_dir: str | Path) -> Iterator[tuple[PatchSpec, Path]]:
    patch_dir = Path(patch_dir)
    for spec in read_index(patch_dir / INDEX_NAME):
        yield spec, patch_dir / f"{spec.patch_id}.png"


def write_patch_set(
    out_dir: str | Path,
    specs: Sequence[PatchSpec],
    slides: Mapping[str, SlideRecord],
    loader: Callable[[str], np.ndarray] = load_image,
    parallelism: int = 1,
) -> Path:
    """Render ``specs`` into ``out_dir`` as PNGs plus an NDJSON index.

    Each slide image is read once; crops are written from a thread pool since
    every spec writes a distinct file.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grouped: dict[str, list[PatchSpec]] = {}
    for s in specs:
        grouped.setdefault(s.slide_id, []).append(s)

    def _write(img: np.ndarray, spec: PatchSpec) -> None:
        crop, _ = render_patch(img, spec)
        save_png(out / f"{spec.patch_id}.png", crop)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for slide_id, group in grouped.items():
            img = loader(slides[slide_id].image_path)
            list(pool.map(lambda sp: _write(img, sp), group))
    write_index(out / INDEX_NAME, specs)
    return out
