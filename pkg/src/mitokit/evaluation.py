"""Point-matched detection metrics, AP@IoU and per-domain reports."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import MetricTriple, harmonic_f1, metrics_from_counts, microns_to_pixels
from .manifest import MITOTIC_FIGURE, AnnotationRecord, DatasetManifest
from .merge import SlideDetection, canonical_key
from .split import SplitAssignment

DEFAULT_RADIUS_MICRONS = 7.5
DEFAULT_BOX_HALF_SIZE = 25.0

MatchMode = Literal["greedy", "optimal"]


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class MatchOutcome:
    """Result of matching; ``pairs`` holds ``(detection index, annotation index, distance)``
    with indices into the caller's sequences."""

    pairs: tuple[tuple[int, int, float], ...]
    tp: int
    fp: int
    fn: int
    radius: float
    mode: str


def _distance(d: SlideDetection, a: AnnotationRecord) -> float:
    return math.hypot(d.center.x - a.center.x, d.center.y - a.center.y)


def _by_slide(items: Sequence, attr: str = "slide_id") -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, it in enumerate(items):
        groups[getattr(it, attr)].append(i)
    return groups


def _radius_for(radius: float | Mapping[str, float], slide_id: str) -> float:
    r = radius[slide_id] if isinstance(radius, Mapping) else radius
    if r <= 0:
        raise EvalError(f"radius must be positive, got {r}")
    return r


def _greedy_stream(
    detections: Sequence[SlideDetection],
    annotations: Sequence[AnnotationRecord],
    radius: float | Mapping[str, float],
) -> Iterator[tuple[int, int | None, float]]:
    """Visit detections in canonical order, yielding ``(det, matched annotation or None, distance)``.

    Because visiting order is score-descending, the matches produced for the
    first ``k`` detections are exactly the greedy result on those ``k`` alone.
    """
    ann_groups = _by_slide(annotations)
    trees: dict[str, tuple[cKDTree, list[int]]] = {}
    for sid, idx in ann_groups.items():
        pts = np.array([[annotations[i].center.x, annotations[i].center.y] for i in idx])
        trees[sid] = (cKDTree(pts), idx)
    taken: set[int] = set()
    for di in sorted(range(len(detections)), key=lambda i: canonical_key(detections[i])):
        d = detections[di]
        entry = trees.get(d.slide_id)
        best: tuple[float, str, int] | None = None
        if entry is not None:
            r = _radius_for(radius, d.slide_id)
            tree, idx = entry
            # widened query; the exact <= radius test below is authoritative
            for k in tree.query_ball_point([d.center.x, d.center.y], r * (1 + 1e-9) + 1e-9):
                ai = idx[k]
                if ai in taken:
                    continue
                dist = _distance(d, annotations[ai])
                if dist <= r:
                    cand = (dist, annotations[ai].ann_id, ai)
                    if best is None or cand < best:
                        best = cand
        if best is None:
            yield di, None, math.nan
        else:
            taken.add(best[2])
            yield di, best[2], best[0]


def greedy_match(
    detections: Sequence[SlideDetection],
    annotations: Sequence[AnnotationRecord],
    radius: float | Mapping[str, float],
) -> MatchOutcome:
    """Score-ordered greedy matching; each detection takes its nearest free annotation within ``radius``.

    Matching never crosses slides. Distance ties go to the smaller ``ann_id``.
    """
    pairs = tuple((di, ai, dist) for di, ai, dist in _greedy_stream(detections, annotations, radius) if ai is not None)
    tp = len(pairs)
    return MatchOutcome(pairs, tp, len(detections) - tp, len(annotations) - tp, _scalar(radius), "greedy")


def _scalar(radius: float | Mapping[str, float]) -> float:
    if isinstance(radius, Mapping):
        vals = set(radius.values())
        return vals.pop() if len(vals) == 1 else math.nan
    return float(radius)


def optimal_match(
    detections: Sequence[SlideDetection],
    annotations: Sequence[AnnotationRecord],
    radius: float | Mapping[str, float],
) -> MatchOutcome:
    """Maximum-cardinality matching on the within-radius graph.

    Among maximum matchings the one with the largest total detection score is
    returned. Each connected component is solved as an assignment problem with
    edge cost ``-(big + score)``, where ``big`` exceeds any attainable score
    sum so cardinality always dominates.
    """
    ann_groups = _by_slide(annotations)
    pairs: list[tuple[int, int, float]] = []
    for sid, det_idx in _by_slide(detections).items():
        a_idx = ann_groups.get(sid)
        if not a_idx:
            continue
        r = _radius_for(radius, sid)
        tree = cKDTree(np.array([[annotations[i].center.x, annotations[i].center.y] for i in a_idx]))
        rows, cols, dists = [], [], []
        for li, di in enumerate(det_idx):
            d = detections[di]
            for k in tree.query_ball_point([d.center.x, d.center.y], r * (1 + 1e-9) + 1e-9):
                dist = _distance(d, annotations[a_idx[k]])
                if dist <= r:
                    rows.append(li)
                    cols.append(k)
                    dists.append(dist)
        if not rows:
            continue
        nd, na = len(det_idx), len(a_idx)
        graph = coo_matrix((np.ones(len(rows)), (rows, np.array(cols) + nd)), shape=(nd + na, nd + na))
        _, comp = connected_components(graph, directed=False)
        edges: dict[int, list[int]] = defaultdict(list)
        for e, li in enumerate(rows):
            edges[comp[li]].append(e)
        for es in edges.values():
            drows = sorted({rows[e] for e in es})
            dcols = sorted({cols[e] for e in es})
            rpos = {v: i for i, v in enumerate(drows)}
            cpos = {v: i for i, v in enumerate(dcols)}
            big = min(len(drows), len(dcols)) + 1.0
            cost = np.zeros((len(drows), len(dcols)))
            edge = np.zeros_like(cost, dtype=bool)
            dist_m = np.zeros_like(cost)
            for e in es:
                i, j = rpos[rows[e]], cpos[cols[e]]
                cost[i, j] = -(big + detections[det_idx[rows[e]]].score)
                edge[i, j] = True
                dist_m[i, j] = dists[e]
            for i, j in zip(*linear_sum_assignment(cost)):
                if edge[i, j]:
                    pairs.append((det_idx[drows[i]], a_idx[dcols[j]], float(dist_m[i, j])))
    pairs.sort()
    tp = len(pairs)
    return MatchOutcome(tuple(pairs), tp, len(detections) - tp, len(annotations) - tp, _scalar(radius), "optimal")


def prf(outcome: MatchOutcome) -> MetricTriple:
    return metrics_from_counts(outcome.tp, outcome.fp, outcome.fn)


# -- AP at IoU ---------------------------------------------------------------


def square_iou(dx: np.ndarray | float, dy: np.ndarray | float, half_size: float) -> np.ndarray:
    """IoU of two axis-aligned squares of side ``2 * half_size`` whose centres differ by ``(dx, dy)``."""
    side = 2.0 * half_size
    ix = np.maximum(0.0, side - np.abs(dx))
    iy = np.maximum(0.0, side - np.abs(dy))
    inter = ix * iy
    return inter / (2.0 * side * side - inter)


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated area under the precision/recall curve of a ranked list."""
    if n_gt == 0:
        return 1.0 if len(tp_flags) == 0 else 0.0
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    precision = tp / np.arange(1, len(tp) + 1)
    recall = tp / n_gt
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_at_iou(
    detections: Sequence[SlideDetection],
    annotations: Sequence[AnnotationRecord],
    iou_threshold: float = 0.5,
    box_half_size: float = DEFAULT_BOX_HALF_SIZE,
) -> float:
    """AP with boxes of half-size ``box_half_size`` drawn around every point.

    Detections are ranked by score; each claims the free annotation with the
    highest IoU (ties: smaller ``ann_id``) and counts as a true positive when
    that IoU reaches ``iou_threshold``.
    """
    groups = _by_slide(annotations)
    pts = {sid: np.array([[annotations[i].center.x, annotations[i].center.y] for i in idx]) for sid, idx in groups.items()}
    free = {sid: np.ones(len(idx), dtype=bool) for sid, idx in groups.items()}
    flags = []
    for d in sorted(detections, key=canonical_key):
        hit = False
        p = pts.get(d.slide_id)
        if p is not None and free[d.slide_id].any():
            iou = square_iou(p[:, 0] - d.center.x, p[:, 1] - d.center.y, box_half_size)
            iou = np.where(free[d.slide_id], iou, -1.0)
            best = iou.max()
            if best >= iou_threshold:
                idx = groups[d.slide_id]
                k = min(np.flatnonzero(iou == best), key=lambda k: annotations[idx[k]].ann_id)
                free[d.slide_id][k] = False
                hit = True
        flags.append(hit)
    return average_precision(flags, len(annotations))


# -- reports -----------------------------------------------------------------


@dataclass
class GroupMetrics:
    n_gt: int = 0
    n_det: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ignored: int = 0
    precision: float = 1.0
    recall: float = 1.0
    f1: float = 1.0

    def add(self, other: GroupMetrics) -> None:
        for k in ("n_gt", "n_det", "tp", "fp", "fn", "ignored"):
            setattr(self, k, getattr(self, k) + getattr(other, k))

    def finalize(self) -> GroupMetrics:
        m = metrics_from_counts(self.tp, self.fp, self.fn)
        self.precision, self.recall, self.f1 = m.precision, m.recall, m.f1
        return self

    @property
    def metrics(self) -> MetricTriple:
        return MetricTriple(self.precision, self.recall, self.f1)


@dataclass
class EvalReport:
    split: str
    radius_microns: float
    operating_threshold: float
    mode: str
    overall: GroupMetrics
    per_domain: dict[str, GroupMetrics] = field(default_factory=dict)
    per_slide: dict[str, GroupMetrics] = field(default_factory=dict)
    ap50: float | None = None

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "radius_microns": self.radius_microns,
            "operating_threshold": self.operating_threshold,
            "mode": self.mode,
            "overall": asdict(self.overall),
            "per_domain": {k: asdict(v) for k, v in sorted(self.per_domain.items())},
            "per_slide": {k: asdict(v) for k, v in sorted(self.per_slide.items())},
            "ap50": self.ap50,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        return cls(
            split=d["split"],
            radius_microns=d["radius_microns"],
            operating_threshold=d["operating_threshold"],
            mode=d["mode"],
            overall=GroupMetrics(**d["overall"]),
            per_domain={k: GroupMetrics(**v) for k, v in d["per_domain"].items()},
            per_slide={k: GroupMetrics(**v) for k, v in d["per_slide"].items()},
            ap50=d.get("ap50"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def format_table(self) -> str:
        header = (
            f"{'split':<8} {'domain':<32} {'n_gt':>7} {'tp':>7} {'fp':>7} {'fn':>7} "
            f"{'precision':>9} {'recall':>9} {'f1':>9}"
        )
        rows = [header, "-" * len(header)]
        for name, g in [*sorted(self.per_domain.items()), ("ALL", self.overall)]:
            rows.append(
                f"{self.split:<8} {name[:32]:<32} {g.n_gt:>7} {g.tp:>7} {g.fp:>7} {g.fn:>7} "
                f"{g.precision:>9.4f} {g.recall:>9.4f} {g.f1:>9.4f}"
            )
        if self.ap50 is not None:
            rows.append(f"AP@0.5: {self.ap50:.4f}")
        return "\n".join(rows)


def slide_radii(manifest: DatasetManifest, radius_microns: float, slide_ids=None) -> dict[str, float]:
    radii = {}
    for s in manifest.slides:
        if slide_ids is not None and s.slide_id not in slide_ids:
            continue
        if s.scale is None:
            raise EvalError(f"slide {s.slide_id!r} has no microns_per_pixel; cannot convert the matching radius")
        radii[s.slide_id] = microns_to_pixels(radius_microns, s.scale)
    return radii


def evaluate(
    detections: Sequence[SlideDetection],
    manifest: DatasetManifest,
    assignment: SplitAssignment | None = None,
    split: str | None = None,
    radius_microns: float = DEFAULT_RADIUS_MICRONS,
    threshold: float = 0.5,
    *,
    mode: MatchMode = "greedy",
    group_by: Mapping[str, str] | None = None,
    ignore_labels: Sequence[str] = (),
    compute_ap: bool = False,
    box_half_size: float = DEFAULT_BOX_HALF_SIZE,
) -> EvalReport:
    """Match detections to mitotic-figure annotations slide by slide and aggregate.

    The micron radius is converted with each slide's own mpp. Counts are
    summed per group (``domain_tag`` unless ``group_by`` maps slide ids to
    group names) and overall, and metrics are computed from the summed counts.
    With ``assignment`` and ``split`` only slides of that split are scored.
    Unmatched detections lying within the radius of an annotation whose label
    is in ``ignore_labels`` are counted as ``ignored`` instead of false positives.
    """
    slides = manifest.slide_index()
    if split is not None:
        if assignment is None:
            raise EvalError("split filter requires an assignment")
        scope = {sid for sid, sp in assignment.split_of_slide(manifest).items() if sp == split}
    else:
        scope = set(slides)
    for d in detections:
        if d.slide_id not in slides:
            raise EvalError(f"detection on unknown slide {d.slide_id!r}")
    radii = slide_radii(manifest, radius_microns, scope)

    dets = [d for d in detections if d.slide_id in scope and d.score >= threshold]
    gt = [a for a in manifest.annotations if a.slide_id in scope and a.label == MITOTIC_FIGURE]
    ign = [a for a in manifest.annotations if a.slide_id in scope and a.label in ignore_labels and a.label != MITOTIC_FIGURE]
    dets_by = _by_slide(dets)
    gt_by = _by_slide(gt)
    ign_by = _by_slide(ign)

    per_slide: dict[str, GroupMetrics] = {}
    for sid in sorted(scope):
        sd = [dets[i] for i in dets_by.get(sid, [])]
        sg = [gt[i] for i in gt_by.get(sid, [])]
        matcher = greedy_match if mode == "greedy" else optimal_match
        out = matcher(sd, sg, radii[sid])
        ignored = 0
        si = [ign[i] for i in ign_by.get(sid, [])]
        if si and out.fp:
            paired = {p[0] for p in out.pairs}
            leftovers = [d for k, d in enumerate(sd) if k not in paired]
            ignored = greedy_match(leftovers, si, radii[sid]).tp
        g = GroupMetrics(n_gt=len(sg), n_det=len(sd), tp=out.tp, fp=out.fp - ignored, fn=out.fn, ignored=ignored)
        if g.tp + g.fn != g.n_gt or g.tp + g.fp + g.ignored != g.n_det:
            raise AssertionError(f"count identity violated on slide {sid}: {g}")
        per_slide[sid] = g.finalize()

    groups = group_by if group_by is not None else {sid: slides[sid].domain_tag for sid in scope}
    per_domain: dict[str, GroupMetrics] = {}
    overall = GroupMetrics()
    for sid, g in per_slide.items():
        per_domain.setdefault(groups[sid], GroupMetrics()).add(g)
        overall.add(g)
    for g in per_domain.values():
        g.finalize()
    overall.finalize()

    ap = None
    if compute_ap:
        all_dets = [d for d in detections if d.slide_id in scope]
        ap = ap_at_iou(all_dets, gt, 0.5, box_half_size)

    return EvalReport(
        split=split or "all",
        radius_microns=radius_microns,
        operating_threshold=threshold,
        mode=mode,
        overall=overall,
        per_domain=per_domain,
        per_slide=per_slide,
        ap50=ap,
    )


# -- threshold sweep ---------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    metrics: MetricTriple


@dataclass(frozen=True)
class SweepResult:
    points: tuple[SweepPoint, ...]
    best_threshold: float
    best_f1: float

    def to_dict(self) -> dict:
        return {
            "best_threshold": self.best_threshold,
            "best_f1": self.best_f1,
            "points": [
                {"threshold": p.threshold, "tp": p.tp, "fp": p.fp, "fn": p.fn, **p.metrics.as_dict()} for p in self.points
            ],
        }

    def format_table(self) -> str:
        rows = [f"{'threshold':>9} {'tp':>7} {'fp':>7} {'fn':>7} {'precision':>9} {'recall':>9} {'f1':>9}"]
        for p in self.points:
            m = p.metrics
            mark = "  *" if p.threshold == self.best_threshold else ""
            rows.append(
                f"{p.threshold:>9.3f} {p.tp:>7} {p.fp:>7} {p.fn:>7} {m.precision:>9.4f} {m.recall:>9.4f} {m.f1:>9.4f}{mark}"
            )
        return "\n".join(rows)


def threshold_sweep(
    detections: Sequence[SlideDetection],
    annotations: Sequence[AnnotationRecord],
    radius: float | Mapping[str, float],
    thresholds: Sequence[float],
) -> SweepResult:
    """Greedy-matched precision/recall/F1 at every threshold in ``thresholds``.

    One greedy pass suffices: the detections kept at threshold ``t`` are a
    prefix of the score-ordered list, and greedy matching of a prefix is the
    prefix of the full greedy run. The best threshold is the lowest one
    attaining the maximal F1.
    """
    if len(thresholds) == 0:
        raise EvalError("threshold grid must not be empty")
    grid = sorted(float(t) for t in thresholds)
    stream = list(_greedy_stream(detections, annotations, radius))
    scores = np.array([detections[di].score for di, _, _ in stream])
    cum_tp = np.concatenate(([0], np.cumsum([ai is not None for _, ai, _ in stream])))
    n_gt = len(annotations)
    points = []
    for t in grid:
        k = int(np.count_nonzero(scores >= t))
        tp = int(cum_tp[k])
        points.append(SweepPoint(t, tp, k - tp, n_gt - tp, metrics_from_counts(tp, k - tp, n_gt - tp)))
    best = max(points, key=lambda p: (p.metrics.f1, -p.threshold))
    return SweepResult(tuple(points), best.threshold, best.metrics.f1)


def check_harmonic(m: MetricTriple, tol: float = 1e-12) -> bool:
    return abs(m.f1 - harmonic_f1(m.precision, m.recall)) <= tol
