"""Synthetic slides with planted mitotic figures, for end-to-end runs without real data."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import MppScale, Point2D, Rect
from .manifest import MITOTIC_FIGURE, AnnotationRecord, DatasetManifest, RegionRecord, SlideRecord


def plant_points(width: int, height: int, n: int, min_separation: float, rng: np.random.Generator, margin: float = 0.0) -> np.ndarray:
    """``n`` uniform points at least ``min_separation`` apart (dart throwing)."""
    pts: list[tuple[float, float]] = []
    attempts = 0
    while len(pts) < n:
        attempts += 1
        if attempts > 1000 * max(n, 1):
            raise RuntimeError(f"could not plant {n} points {min_separation} px apart in {width}x{height}")
        x = margin + rng.random() * (width - 2 * margin)
        y = margin + rng.random() * (height - 2 * margin)
        if pts:
            arr = np.asarray(pts)
            if np.hypot(arr[:, 0] - x, arr[:, 1] - y).min() < min_separation:
                continue
        pts.append((x, y))
    return np.asarray(pts).reshape(-1, 2)


def synthetic_manifest(
    n_slides: int = 1,
    width: int = 4000,
    height: int = 4000,
    n_annotations: int = 200,
    mpp: float = 0.25,
    min_separation: float = 80.0,
    domains: tuple[str, ...] = ("synthetic",),
    seed: int = 0,
    image_dir: str | Path | None = None,
    necrosis_regions: int = 0,
) -> DatasetManifest:
    """Build a manifest of ``n_slides`` slides, each with ``n_annotations`` mitotic figures.

    Slides cycle through ``domains`` and each slide is its own case. When
    ``image_dir`` is given a matching PNG is written for every slide.
    """
    rng = np.random.default_rng(seed)
    slides, anns, regions = [], [], []
    for k in range(n_slides):
        sid = f"synthetic-{k:03d}"
        image_path = str(Path(image_dir) / f"{sid}.png") if image_dir is not None else f"{sid}.png"
        slides.append(SlideRecord(sid, "synthetic", image_path, width, height, MppScale(mpp), domains[k % len(domains)], sid))
        pts = plant_points(width, height, n_annotations, min_separation, rng)
        for i, (x, y) in enumerate(pts):
            anns.append(AnnotationRecord(f"{sid}-mf{i:05d}", sid, Point2D(float(x), float(y)), MITOTIC_FIGURE, "synthetic"))
        for j in range(necrosis_regions):
            w, h = (int(v) for v in rng.integers(200, 900, size=2))
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            regions.append(RegionRecord(f"{sid}-nec{j:03d}", sid, Rect(x0, y0, w, h), "necrosis"))
        if image_dir is not None:
            write_synthetic_image(image_path, width, height, pts, rng)
    return DatasetManifest(tuple(slides), tuple(anns), tuple(regions))


def write_synthetic_image(path: str | Path, width: int, height: int, points: np.ndarray, rng: np.random.Generator) -> None:
    """Pinkish noise background with a dark disc at every planted point."""
    from PIL import Image, ImageDraw

    base = np.empty((height, width, 3), dtype=np.uint8)
    base[...] = (230, 190, 210)
    noise = rng.integers(-12, 13, size=(height, width, 1), dtype=np.int16)
    img = Image.fromarray(np.clip(base.astype(np.int16) + noise, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for x, y in points:
        draw.ellipse((x - 8, y - 8, x + 8, y + 8), fill=(70, 30, 90))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
