"""Synthetic detector that perturbs known ground truth with controlled noise."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..core import Point2D
from ..manifest import MITOTIC_FIGURE
from ..patchset import PatchSpec
from .protocol import PatchDetection


@dataclass(frozen=True)
class OracleParams:
    jitter_sigma: float = 0.0
    drop_rate: float = 0.0
    fp_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.jitter_sigma < 0:
            raise ValueError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1], got {self.drop_rate}")
        if self.fp_rate < 0:
            raise ValueError(f"fp_rate must be >= 0, got {self.fp_rate}")


def patch_rng(seed: int, patch_id: str) -> np.random.Generator:
    key = int.from_bytes(hashlib.sha256(patch_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([seed & 0xFFFFFFFF, key])


def _inside(v: float, size: int) -> float:
    # keep jittered points in the half-open patch [0, size)
    return float(min(max(v, 0.0), np.nextafter(size, 0)))


def detect_patch(spec: PatchSpec, params: OracleParams) -> list[PatchDetection]:
    """Noisy copy of the mitotic figures in ``spec.local_annotations``.

    Each figure survives with probability ``1 - drop_rate`` at a Gaussian
    jittered position, scored in ``[0.5, 1]``; a Poisson(``fp_rate``) number
    of uniform false positives is added, scored in ``[0, 0.5)``.
    """
    rng = patch_rng(params.seed, spec.patch_id)
    out = []
    for label, p in spec.local_annotations:
        if label != MITOTIC_FIGURE:
            continue
        keep = rng.random() >= params.drop_rate
        dx, dy = rng.normal(0.0, 1.0, size=2) * params.jitter_sigma
        score = 0.5 + 0.5 * rng.random()
        if keep:
            if params.jitter_sigma == 0:
                center = p
            else:
                center = Point2D(_inside(p.x + dx, spec.width), _inside(p.y + dy, spec.height))
            out.append(PatchDetection(spec.patch_id, center, float(score)))
    n_fp = int(rng.poisson(params.fp_rate)) if params.fp_rate > 0 else 0
    for _ in range(n_fp):
        x = rng.random() * spec.width
        y = rng.random() * spec.height
        score = 0.5 * rng.random()
        out.append(PatchDetection(spec.patch_id, Point2D(_inside(x, spec.width), _inside(y, spec.height)), float(score)))
    return out


def oracle_detector(patches: Iterable[PatchSpec], params: OracleParams = OracleParams()) -> dict[str, list[PatchDetection]]:
    """Run :func:`detect_patch` over patches; results keyed by patch id."""
    return {spec.patch_id: detect_patch(spec, params) for spec in patches}
