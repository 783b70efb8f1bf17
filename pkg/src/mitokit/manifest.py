"""Canonical dataset manifest, COCO-style adapters and summary statistics.

The manifest is a single JSON document::

    {"format_version": 1, "slides": [...], "annotations": [...], "regions": [...]}

Coordinates are slide pixels. External annotation files are normalized into
this model by :func:`import_point_annotations`.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import MppScale, Point2D, Rect

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

MITOTIC_FIGURE = "mitotic_figure"
IMPOSTER = "imposter"
IGNORE = "ignore"
ANNOTATION_LABELS = (MITOTIC_FIGURE, IMPOSTER)
REGION_LABELS = ("necrosis", "other")


class ManifestError(ValueError):
    """Raised for unparsable manifests or broken integrity constraints."""


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    dataset_id: str
    image_path: str
    width: int
    height: int
    scale: MppScale | None
    domain_tag: str
    case_id: str

    def __post_init__(self) -> None:
        if not self.slide_id:
            raise ManifestError("empty slide_id")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ManifestError(f"slide {self.slide_id}: non-integer size {self.width}x{self.height}")
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(f"slide {self.slide_id}: size must be positive, got {self.width}x{self.height}")

    @property
    def bounds(self) -> Rect:
        return Rect(0, 0, self.width, self.height)


@dataclass(frozen=True)
class AnnotationRecord:
    ann_id: str
    slide_id: str
    center: Point2D
    label: str
    source: str = ""

    def __post_init__(self) -> None:
        if self.label not in ANNOTATION_LABELS:
            raise ManifestError(f"annotation {self.ann_id}: unknown label {self.label!r}")


@dataclass(frozen=True)
class RegionRecord:
    region_id: str
    slide_id: str
    bounds: Rect
    region_label: str

    def __post_init__(self) -> None:
        if self.region_label not in REGION_LABELS:
            raise ManifestError(f"region {self.region_id}: unknown label {self.region_label!r}")
        if self.bounds.area <= 0:
            raise ManifestError(f"region {self.region_id}: empty bounds")


@dataclass(frozen=True)
class DatasetManifest:
    slides: tuple[SlideRecord, ...] = ()
    annotations: tuple[AnnotationRecord, ...] = ()
    regions: tuple[RegionRecord, ...] = ()
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "slides", tuple(self.slides))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "regions", tuple(self.regions))
        validate(self)

    def slide_index(self) -> dict[str, SlideRecord]:
        return {s.slide_id: s for s in self.slides}

    def annotations_by_slide(self) -> dict[str, list[AnnotationRecord]]:
        out: dict[str, list[AnnotationRecord]] = {s.slide_id: [] for s in self.slides}
        for a in self.annotations:
            out[a.slide_id].append(a)
        return out

    def case_ids(self) -> list[str]:
        return sorted({s.case_id for s in self.slides})


def validate(m: DatasetManifest) -> None:
    """Check id uniqueness and referential integrity; raise on the first offending record."""
    slides: dict[str, SlideRecord] = {}
    for s in m.slides:
        if s.slide_id in slides:
            raise ManifestError(f"duplicate slide_id {s.slide_id!r}")
        slides[s.slide_id] = s
    seen: set[str] = set()
    for a in m.annotations:
        if a.ann_id in seen:
            raise ManifestError(f"duplicate ann_id {a.ann_id!r}")
        seen.add(a.ann_id)
        s = slides.get(a.slide_id)
        if s is None:
            raise ManifestError(f"annotation {a.ann_id!r} references unknown slide_id {a.slide_id!r}")
        if not (0 <= a.center.x <= s.width and 0 <= a.center.y <= s.height):
            raise ManifestError(
                f"annotation {a.ann_id!r} at ({a.center.x}, {a.center.y}) outside slide {s.slide_id!r}"
            )
    seen.clear()
    for r in m.regions:
        if r.region_id in seen:
            raise ManifestError(f"duplicate region_id {r.region_id!r}")
        seen.add(r.region_id)
        s = slides.get(r.slide_id)
        if s is None:
            raise ManifestError(f"region {r.region_id!r} references unknown slide_id {r.slide_id!r}")
        if not r.bounds.within(s.width, s.height):
            raise ManifestError(f"region {r.region_id!r} exceeds bounds of slide {s.slide_id!r}")


# -- serialization -----------------------------------------------------------


def _slide_to_dict(s: SlideRecord) -> dict[str, Any]:
    return {
        "slide_id": s.slide_id,
        "dataset_id": s.dataset_id,
        "image_path": s.image_path,
        "width": s.width,
        "height": s.height,
        "microns_per_pixel": None if s.scale is None else s.scale.microns_per_pixel,
        "domain_tag": s.domain_tag,
        "case_id": s.case_id,
    }


def _annotation_to_dict(a: AnnotationRecord) -> dict[str, Any]:
    return {
        "ann_id": a.ann_id,
        "slide_id": a.slide_id,
        "x": a.center.x,
        "y": a.center.y,
        "label": a.label,
        "source": a.source,
    }


def _region_to_dict(r: RegionRecord) -> dict[str, Any]:
    b = r.bounds
    return {
        "region_id": r.region_id,
        "slide_id": r.slide_id,
        "x": b.x,
        "y": b.y,
        "width": b.width,
        "height": b.height,
        "region_label": r.region_label,
    }


def manifest_to_dict(m: DatasetManifest) -> dict[str, Any]:
    return {
        "format_version": m.format_version,
        "slides": [_slide_to_dict(s) for s in m.slides],
        "annotations": [_annotation_to_dict(a) for a in m.annotations],
        "regions": [_region_to_dict(r) for r in m.regions],
    }


def _require(d: Mapping[str, Any], key: str, where: str) -> Any:
    try:
        return d[key]
    except KeyError:
        raise ManifestError(f"{where}: missing field {key!r}") from None
    except TypeError:
        raise ManifestError(f"{where}: expected an object, got {type(d).__name__}") from None


def manifest_from_dict(doc: Mapping[str, Any]) -> DatasetManifest:
    if not isinstance(doc, Mapping):
        raise ManifestError("manifest must be a JSON object")
    version = _require(doc, "format_version", "manifest")
    if version != FORMAT_VERSION:
        raise ManifestError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        slides = []
        for i, d in enumerate(doc.get("slides", [])):
            where = f"slides[{i}]"
            mpp = d.get("microns_per_pixel")
            slides.append(
                SlideRecord(
                    slide_id=str(_require(d, "slide_id", where)),
                    dataset_id=str(d.get("dataset_id", "")),
                    image_path=str(d.get("image_path", "")),
                    width=int(_require(d, "width", where)),
                    height=int(_require(d, "height", where)),
                    scale=None if mpp is None else MppScale(float(mpp)),
                    domain_tag=str(d.get("domain_tag", "unknown")),
                    case_id=str(d.get("case_id") or d["slide_id"]),
                )
            )
        annotations = []
        for i, d in enumerate(doc.get("annotations", [])):
            where = f"annotations[{i}]"
            annotations.append(
                AnnotationRecord(
                    ann_id=str(_require(d, "ann_id", where)),
                    slide_id=str(_require(d, "slide_id", where)),
                    center=Point2D(float(_require(d, "x", where)), float(_require(d, "y", where))),
                    label=str(_require(d, "label", where)),
                    source=str(d.get("source", "")),
                )
            )
        regions = []
        for i, d in enumerate(doc.get("regions", [])):
            where = f"regions[{i}]"
            regions.append(
                RegionRecord(
                    region_id=str(_require(d, "region_id", where)),
                    slide_id=str(_require(d, "slide_id", where)),
                    bounds=Rect(
                        float(_require(d, "x", where)),
                        float(_require(d, "y", where)),
                        float(_require(d, "width", where)),
                        float(_require(d, "height", where)),
                    ),
                    region_label=str(_require(d, "region_label", where)),
                )
            )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(str(exc)) from exc
    return DatasetManifest(tuple(slides), tuple(annotations), tuple(regions), version)


def dumps_manifest(m: DatasetManifest) -> str:
    """Canonical text form: sorted keys, two-space indent, trailing newline."""
    return json.dumps(manifest_to_dict(m), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def save_manifest(m: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(dumps_manifest(m), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    return manifest_from_dict(doc)


def merge_manifests(*manifests: DatasetManifest) -> DatasetManifest:
    return DatasetManifest(
        tuple(s for m in manifests for s in m.slides),
        tuple(a for m in manifests for a in m.annotations),
        tuple(r for m in manifests for r in m.regions),
    )


# -- COCO-like import --------------------------------------------------------


@dataclass
class ImportResult:
    slides: list[SlideRecord]
    annotations: list[AnnotationRecord]
    skipped: Counter = field(default_factory=Counter)

    def __iter__(self):
        # allows ``slides, annotations = import_point_annotations(...)``
        return iter((self.slides, self.annotations))

    def to_manifest(self) -> DatasetManifest:
        return DatasetManifest(tuple(self.slides), tuple(self.annotations))


_DOMAIN_KEYS = ("domain_tag", "domain", "tumor_type", "tumor")
_MPP_KEYS = ("microns_per_pixel", "mpp")


def _first(d: Mapping[str, Any], keys: Iterable[str]) -> Any:
    for k in keys:
        if d.get(k) is not None:
            return d[k]
    return None


def _center(ann: Mapping[str, Any], box_format: str) -> tuple[float, float] | None:
    if ann.get("bbox"):
        b = [float(v) for v in ann["bbox"]]
        if box_format == "xyxy":
            return (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
        if box_format == "xywh":
            return b[0] + b[2] / 2, b[1] + b[3] / 2
        raise ValueError(f"unknown box_format {box_format!r}")
    point = ann.get("point") or ann.get("keypoints")
    if point:
        return float(point[0]), float(point[1])
    return None


def import_point_annotations(
    file: str | Path,
    dataset_id: str,
    label_map: Mapping[int | str, str],
    *,
    box_format: str = "xyxy",
    default_mpp: float | None = None,
    image_root: str | Path | None = None,
) -> ImportResult:
    """Normalize a COCO-like point/box annotation file into manifest records.

    ``label_map`` maps source category ids to ``mitotic_figure``, ``imposter``
    or ``ignore``. Boxes default to ``[x0, y0, x1, y1]`` as in the MIDOG
    releases; pass ``box_format="xywh"`` for standard COCO boxes. Annotations
    outside their image are skipped and counted in ``result.skipped``.
    """
    path = Path(file)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    labels = {str(k): v for k, v in label_map.items()}
    for v in labels.values():
        if v not in (*ANNOTATION_LABELS, IGNORE):
            raise ManifestError(f"label_map target {v!r} is not one of {ANNOTATION_LABELS + (IGNORE,)}")

    result = ImportResult([], [])
    slides_by_image: dict[str, SlideRecord] = {}
    for i, img in enumerate(sorted(doc.get("images", []), key=lambda d: str(d.get("id")))):
        where = f"{path.name}: images[{i}]"
        image_id = str(_require(img, "id", where))
        file_name = str(img.get("file_name", image_id))
        mpp = _first(img, _MPP_KEYS)
        if mpp is None:
            mpp = default_mpp
        slide_id = f"{dataset_id}:{image_id}"
        slide = SlideRecord(
            slide_id=slide_id,
            dataset_id=dataset_id,
            image_path=str(Path(image_root) / file_name) if image_root else file_name,
            width=int(_require(img, "width", where)),
            height=int(_require(img, "height", where)),
            scale=None if mpp is None else MppScale(float(mpp)),
            domain_tag=str(_first(img, _DOMAIN_KEYS) or "unknown"),
            case_id=str(img.get("case_id") or slide_id),
        )
        slides_by_image[image_id] = slide
        result.slides.append(slide)

    anns = doc.get("annotations", [])
    order = sorted(range(len(anns)), key=lambda k: (str(anns[k].get("image_id")), str(anns[k].get("id", k)), k))
    seen_ids: set[str] = set()
    for k in order:
        ann = anns[k]
        cat = str(ann.get("category_id"))
        if cat not in labels:
            raise ManifestError(f"{path.name}: annotation {ann.get('id', k)} has unmapped category {cat}")
        label = labels[cat]
        if label == IGNORE:
            result.skipped["ignored"] += 1
            continue
        slide = slides_by_image.get(str(ann.get("image_id")))
        if slide is None:
            raise ManifestError(f"{path.name}: annotation {ann.get('id', k)} references unknown image {ann.get('image_id')}")
        c = _center(ann, box_format)
        if c is None:
            raise ManifestError(f"{path.name}: annotation {ann.get('id', k)} has neither bbox nor point")
        x, y = c
        if not (math.isfinite(x) and math.isfinite(y) and 0 <= x <= slide.width and 0 <= y <= slide.height):
            result.skipped["out_of_bounds"] += 1
            continue
        ann_id = f"{dataset_id}:{ann.get('id', k)}"
        if ann_id in seen_ids:
            raise ManifestError(f"{path.name}: duplicate annotation id {ann.get('id')}")
        seen_ids.add(ann_id)
        result.annotations.append(AnnotationRecord(ann_id, slide.slide_id, Point2D(x, y), label, dataset_id))

    if result.skipped["out_of_bounds"]:
        logger.warning("%s: skipped %d annotations outside image bounds", path.name, result.skipped["out_of_bounds"])
    return result


# -- statistics --------------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    n_slides: int
    n_cases: int
    n_annotations: int
    n_regions: int
    per_label: dict[str, int]
    per_domain: dict[str, dict[str, int]]
    per_dataset: dict[str, dict[str, int]]

    def as_dict(self) -> dict[str, Any]:
        return {
            "n_slides": self.n_slides,
            "n_cases": self.n_cases,
            "n_annotations": self.n_annotations,
            "n_regions": self.n_regions,
            "per_label": dict(self.per_label),
            "per_domain": {k: dict(v) for k, v in self.per_domain.items()},
            "per_dataset": {k: dict(v) for k, v in self.per_dataset.items()},
        }

    def format_table(self) -> str:
        header = f"{'group':<12} {'name':<32} {'slides':>7} {'cases':>7} {MITOTIC_FIGURE:>15} {IMPOSTER:>9}"
        lines = [header, "-" * len(header)]
        for group, table in (("domain", self.per_domain), ("dataset", self.per_dataset)):
            for name, c in sorted(table.items()):
                lines.append(
                    f"{group:<12} {name:<32} {c['slides']:>7} {c['cases']:>7} "
                    f"{c[MITOTIC_FIGURE]:>15} {c[IMPOSTER]:>9}"
                )
        lines.append(
            f"{'total':<12} {'':<32} {self.n_slides:>7} {self.n_cases:>7} "
            f"{self.per_label[MITOTIC_FIGURE]:>15} {self.per_label[IMPOSTER]:>9}"
        )
        return "\n".join(lines)


def dataset_stats(m: DatasetManifest) -> DatasetStats:
    slides = m.slide_index()

    def empty() -> dict[str, int]:
        return {"slides": 0, "cases": 0, MITOTIC_FIGURE: 0, IMPOSTER: 0}

    per_domain: dict[str, dict[str, int]] = {}
    per_dataset: dict[str, dict[str, int]] = {}
    cases_domain: dict[str, set[str]] = {}
    cases_dataset: dict[str, set[str]] = {}
    for s in m.slides:
        per_domain.setdefault(s.domain_tag, empty())["slides"] += 1
        per_dataset.setdefault(s.dataset_id, empty())["slides"] += 1
        cases_domain.setdefault(s.domain_tag, set()).add(s.case_id)
        cases_dataset.setdefault(s.dataset_id, set()).add(s.case_id)
    for k, v in cases_domain.items():
        per_domain[k]["cases"] = len(v)
    for k, v in cases_dataset.items():
        per_dataset[k]["cases"] = len(v)

    per_label = {label: 0 for label in ANNOTATION_LABELS}
    for a in m.annotations:
        s = slides[a.slide_id]
        per_label[a.label] += 1
        per_domain[s.domain_tag][a.label] += 1
        per_dataset[s.dataset_id][a.label] += 1

    return DatasetStats(
        n_slides=len(m.slides),
        n_cases=len({s.case_id for s in m.slides}),
        n_annotations=len(m.annotations),
        n_regions=len(m.regions),
        per_label=per_label,
        per_domain=per_domain,
        per_dataset=per_dataset,
    )
