"""Case-grouped, domain-stratified train/valid/test assignment."""

from __future__ import annotations

import json
import math
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .manifest import DatasetManifest

SPLITS = ("train", "valid", "test")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.7
    valid: float = 0.15
    test: float = 0.15

    def __post_init__(self) -> None:
        vals = self.as_tuple()
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise SplitError(f"split ratios must be non-negative, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise SplitError(f"split ratios must sum to 1, got {sum(vals)!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.train, self.valid, self.test)


@dataclass(frozen=True)
class SplitAssignment:
    """Case to split mapping.

    ``assignments`` is a sequence of ``(case_id, split)`` pairs rather than a
    dict so that a corrupted file listing a case twice can still be loaded and
    diagnosed by :func:`verify_no_leakage`.
    """

    assignments: tuple[tuple[str, str], ...]
    seed: int
    ratios: SplitRatios = field(default_factory=SplitRatios)

    def as_dict(self) -> dict[str, str]:
        return dict(self.assignments)

    def split_of_slide(self, manifest: DatasetManifest) -> dict[str, str]:
        cases = self.as_dict()
        return {s.slide_id: cases[s.case_id] for s in manifest.slides if s.case_id in cases}

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "ratios": {"train": self.ratios.train, "valid": self.ratios.valid, "test": self.ratios.test},
            "assignments": [{"case_id": c, "split": s} for c, s in self.assignments],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> SplitAssignment:
        doc = json.loads(text)
        pairs = []
        for rec in doc["assignments"]:
            if rec["split"] not in SPLITS:
                raise SplitError(f"case {rec['case_id']!r}: unknown split {rec['split']!r}")
            pairs.append((str(rec["case_id"]), rec["split"]))
        return cls(tuple(pairs), int(doc["seed"]), SplitRatios(**doc["ratios"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> SplitAssignment:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def apportion(n: int, ratios: SplitRatios) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``n`` items.

    Floors first; leftovers go to the largest fractional remainders, ties
    resolved in train, valid, test order.
    """
    quotas = [n * r for r in ratios.as_tuple()]
    # the epsilon absorbs float error such as 10 * 0.7 == 7.000000000000001
    floors = [math.floor(q + 1e-9) for q in quotas]
    remainders = [round(max(q - f, 0.0), 9) for q, f in zip(quotas, floors)]
    leftover = n - sum(floors)
    for i in sorted(range(3), key=lambda i: (-remainders[i], i))[:leftover]:
        floors[i] += 1
    return floors[0], floors[1], floors[2]


def case_domains(manifest: DatasetManifest) -> dict[str, str]:
    """Domain of each case: the most frequent domain_tag among its slides (ties: smallest tag)."""
    tags: dict[str, Counter] = defaultdict(Counter)
    for s in manifest.slides:
        tags[s.case_id][s.domain_tag] += 1
    return {case: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for case, c in tags.items()}


def _domain_rng(seed: int, domain: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(domain.encode("utf-8"))])


def stratified_split(manifest: DatasetManifest, ratios: SplitRatios = SplitRatios(), seed: int = 0) -> SplitAssignment:
    if not manifest.slides:
        raise SplitError("cannot split an empty manifest")
    by_domain: dict[str, list[str]] = defaultdict(list)
    for case, domain in case_domains(manifest).items():
        by_domain[domain].append(case)

    assigned: dict[str, str] = {}
    for domain in sorted(by_domain):
        cases = sorted(by_domain[domain])
        order = _domain_rng(seed, domain).permutation(len(cases))
        counts = apportion(len(cases), ratios)
        it = iter(order)
        for split, k in zip(SPLITS, counts):
            for _ in range(k):
                assigned[cases[next(it)]] = split
    return SplitAssignment(tuple(sorted(assigned.items())), seed, ratios)


@dataclass
class LeakageReport:
    ok: bool
    leaked_cases: list[str]
    per_domain: dict[str, dict[str, int]]

    def as_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "leaked_cases": self.leaked_cases, "per_domain": self.per_domain}


def verify_no_leakage(assignment: SplitAssignment, manifest: DatasetManifest) -> LeakageReport:
    """Check that no case (hence no slide or patch) appears in more than one split.

    Raises :class:`SplitError` when a manifest case is not covered at all.
    """
    listed: Mapping[str, list[str]] = defaultdict(list)
    for case, split in assignment.assignments:
        listed[case].append(split)
    domains = case_domains(manifest)
    missing = sorted(c for c in domains if c not in listed)
    if missing:
        raise SplitError(f"{len(missing)} case(s) not covered by the assignment, first: {missing[0]!r}")
    leaked = sorted(c for c, splits in listed.items() if len(splits) > 1)

    per_domain: dict[str, dict[str, int]] = {}
    for case, domain in domains.items():
        counts = per_domain.setdefault(domain, {s: 0 for s in SPLITS})
        for split in listed[case]:
            counts[split] += 1
    return LeakageReport(ok=not leaked, leaked_cases=leaked, per_domain=dict(sorted(per_domain.items())))
