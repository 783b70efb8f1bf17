"""NDJSON wire protocol between the coordinator and detector worker processes.

Job line::

    {"patch_id":"...","image_path":"...","width":380,"height":380}

Result line::

    {"patch_id":"...","detections":[{"x":1.5,"y":2.0,"score":0.9,"label":"mitotic_figure"}]}

A worker announces itself with ``{"ready":true}`` before reading jobs, and
answers jobs in the order it receives them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Mapping

from ..core import Point2D

DETECTION_LABEL = "mitotic_figure"
READY_LINE = '{"ready":true}'


class ProtocolError(ValueError):
    """A malformed or out-of-contract line; carries the raw line and, when known, the patch id."""

    def __init__(self, message: str, line: str = "", patch_id: str | None = None):
        super().__init__(message)
        self.line = line
        self.patch_id = patch_id


@dataclass(frozen=True)
class WorkerJob:
    patch_id: str
    image_path: str
    width: int
    height: int


@dataclass(frozen=True)
class PatchDetection:
    patch_id: str
    center: Point2D
    score: float
    label: str = DETECTION_LABEL

    def to_dict(self) -> dict[str, Any]:
        return {"patch_id": self.patch_id, "x": self.center.x, "y": self.center.y, "score": self.score, "label": self.label}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PatchDetection:
        return cls(d["patch_id"], Point2D(float(d["x"]), float(d["y"])), float(d["score"]), d.get("label", DETECTION_LABEL))


@dataclass(frozen=True)
class WorkerResult:
    patch_id: str
    detections: tuple[PatchDetection, ...] = ()


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def encode_job(job: WorkerJob) -> str:
    return _dumps({"patch_id": job.patch_id, "image_path": job.image_path, "width": job.width, "height": job.height})


def decode_job(line: str) -> WorkerJob:
    doc = _loads(line)
    try:
        job = WorkerJob(str(doc["patch_id"]), str(doc["image_path"]), doc["width"], doc["height"])
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed job: {exc}", line) from None
    if not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in (job.width, job.height)):
        raise ProtocolError("job width/height must be positive integers", line, job.patch_id)
    return job


def encode_result(result: WorkerResult) -> str:
    return _dumps(
        {
            "patch_id": result.patch_id,
            "detections": [
                {"x": d.center.x, "y": d.center.y, "score": d.score, "label": d.label} for d in result.detections
            ],
        }
    )


def _loads(line: str) -> Any:
    try:
        doc = json.loads(line)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ProtocolError(f"not a JSON line: {exc}", line) from None
    if not isinstance(doc, dict):
        raise ProtocolError("expected a JSON object", line)
    return doc


def _number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def decode_result(line: str, jobs: Mapping[str, WorkerJob]) -> WorkerResult:
    """Parse and validate one result line against the outstanding ``jobs``.

    Coordinates must lie in the half-open patch ``[0, width) x [0, height)``
    and scores in ``[0, 1]``; violations raise rather than being clipped.
    """
    doc = _loads(line)
    patch_id = doc.get("patch_id")
    if not isinstance(patch_id, str):
        raise ProtocolError("result lacks a string patch_id", line)
    job = jobs.get(patch_id)
    if job is None:
        raise ProtocolError(f"result for unknown patch_id {patch_id!r}", line, patch_id)
    dets = doc.get("detections")
    if not isinstance(dets, list):
        raise ProtocolError("result lacks a detections list", line, patch_id)
    out = []
    for i, d in enumerate(dets):
        if not isinstance(d, dict) or not all(_number(d.get(k)) for k in ("x", "y", "score")):
            raise ProtocolError(f"detection {i}: x, y and score must be finite numbers", line, patch_id)
        x, y, score = float(d["x"]), float(d["y"]), float(d["score"])
        if not (0 <= x < job.width and 0 <= y < job.height):
            raise ProtocolError(f"detection {i}: ({x}, {y}) outside {job.width}x{job.height} patch", line, patch_id)
        if not 0.0 <= score <= 1.0:
            raise ProtocolError(f"detection {i}: score {score} outside [0, 1]", line, patch_id)
        label = d.get("label", DETECTION_LABEL)
        if label != DETECTION_LABEL:
            raise ProtocolError(f"detection {i}: unsupported label {label!r}", line, patch_id)
        out.append(PatchDetection(patch_id, Point2D(x, y), score, label))
    return WorkerResult(patch_id, tuple(out))


def write_detections(path, detections) -> None:
    """Persist PatchDetection records as NDJSON."""
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(_dumps(d.to_dict()) + "\n")


def read_detections(path) -> list[PatchDetection]:
    with open(path, encoding="utf-8") as fh:
        return [PatchDetection.from_dict(json.loads(line)) for line in fh if line.strip()]
