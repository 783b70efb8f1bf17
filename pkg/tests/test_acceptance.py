"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary, so
``pytest tests/test_acceptance.py`` ends with a compact scoreboard.
"""

import math
import os
import time
from functools import lru_cache

import numpy as np
import pytest

from mitokit.augment import AnnotatedPatch, AugmentConfig, apply_pipeline, flip, resize, sample_transform
from mitokit.core import Point2D, Rect, harmonic_f1
from mitokit.detect import OracleParams, oracle_detector, run_detector_pool, write_detections, flatten
from mitokit.evaluation import ap_at_iou, evaluate, greedy_match, optimal_match, slide_radii
from mitokit.manifest import DatasetManifest, dataset_stats, import_point_annotations
from mitokit.merge import SlideDetection, lift_to_slide, radius_suppress, radius_suppress_naive, suppress_per_slide
from mitokit.patchset import make_spec, plan_slide_tiles, plan_tile_grid
from mitokit.split import SPLITS, SplitRatios, stratified_split, verify_no_leakage
from mitokit.synthetic import synthetic_manifest

from conftest import ACCEPTANCE_LINES, ann, slide, worker_cmd


def record(n, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] AC{n:<2} {title}" + (f" | {detail}" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def det(x, y, score, slide_id="s"):
    return SlideDetection(slide_id, Point2D(x, y), score)


# 1 ---------------------------------------------------------------------------


def test_ac01_f1_identity():
    f1 = harmonic_f1(0.746, 0.839)
    record(1, "harmonic_f1(0.746, 0.839) = 0.789 +/- 0.001", abs(f1 - 0.789) <= 0.001, f"f1={f1:.6f}")


# 2 ---------------------------------------------------------------------------


def test_ac02_published_scale_reproduction():
    line = "[SKIP] AC2  published-scale reproduction | not possible: held-out test set and trained detector unavailable"
    print(line)
    ACCEPTANCE_LINES.append(line)
    pytest.skip("published numbers cannot be reproduced without the withheld test set and trained model")


# 3 ---------------------------------------------------------------------------


def test_ac03_noiseless_end_to_end():
    m = synthetic_manifest(n_slides=1, width=4000, height=4000, n_annotations=200, seed=0)
    t0 = time.perf_counter()
    tiles = plan_slide_tiles(m, 380, 76)
    found = oracle_detector(tiles, OracleParams())
    patch_dets = [d for t in tiles for d in found[t.patch_id]]
    lifted = lift_to_slide(patch_dets, {t.patch_id: t for t in tiles})
    kept = suppress_per_slide(lifted, slide_radii(m, 7.5))
    report = evaluate(kept, m, radius_microns=7.5, threshold=0.5)
    elapsed = time.perf_counter() - t0
    o = report.overall
    ok = (o.precision, o.recall, o.f1) == (1.0, 1.0, 1.0) and o.n_gt == 200 and elapsed < 10.0
    record(3, "noiseless oracle end-to-end P=R=F1=1.0 in < 10 s", ok,
           f"P={o.precision} R={o.recall} F1={o.f1} tiles={len(tiles)} t={elapsed:.2f}s")


# 4 ---------------------------------------------------------------------------


def test_ac04_noisy_oracle_consistency():
    # Non-overlapping 10 x 10 tiling of a 3800 px slide: every annotation lies in
    # exactly one tile, so the generator's per-figure keep rate is what recall measures.
    tp = n_gt = fp = n_tiles = 0
    for seed in range(20):
        m = synthetic_manifest(n_slides=1, width=3800, height=3800, n_annotations=200, seed=seed)
        tiles = plan_slide_tiles(m, 380, 0)
        params = OracleParams(jitter_sigma=2.0, drop_rate=0.2, fp_rate=2.0, seed=seed)
        found = oracle_detector(tiles, params)
        lifted = lift_to_slide([d for t in tiles for d in found[t.patch_id]], {t.patch_id: t for t in tiles})
        r = evaluate(lifted, m, radius_microns=7.5, threshold=0.0).overall
        tp, n_gt, fp, n_tiles = tp + r.tp, n_gt + r.n_gt, fp + r.fp, n_tiles + len(tiles)
    recall = tp / n_gt
    expected_fp = 2.0 * n_tiles
    sigma = math.sqrt(expected_fp)
    ok = abs(recall - 0.80) <= 0.03 and abs(fp - expected_fp) <= 3 * sigma
    record(4, "noisy oracle recall 0.80 +/- 0.03, FP within 3 sigma of Poisson", ok,
           f"recall={recall:.4f} fp={fp} expected={expected_fp:.0f} 3sigma={3 * sigma:.1f}")


# 5 ---------------------------------------------------------------------------


def _brute_max_matching(dets, anns, r):
    """Exhaustive maximum-cardinality matching by enumeration over detection choices."""
    adj = [
        [j for j, a in enumerate(anns) if math.dist((d.center.x, d.center.y), (a.center.x, a.center.y)) <= r]
        for d in dets
    ]

    @lru_cache(maxsize=None)
    def best(i, used):
        if i == len(dets):
            return 0
        out = best(i + 1, used)
        for j in adj[i]:
            if not used >> j & 1:
                out = max(out, 1 + best(i + 1, used | 1 << j))
        return out

    return best(0, 0)


def test_ac05_matching_audit():
    rng = np.random.default_rng(2025)
    fixtures = [([det(20, 0, 0.9), det(0, 0, 0.8)], [ann("g0", "s", 0, 0), ann("g1", "s", 40, 0)], 30.0)]
    for _ in range(600):
        nd, na = int(rng.integers(0, 9)), int(rng.integers(0, 9))
        dets = [det(*rng.uniform(0, 100, 2), round(float(rng.random()), 2)) for _ in range(nd)]
        anns = [ann(f"g{k}", "s", *rng.uniform(0, 100, 2)) for k in range(na)]
        fixtures.append((dets, anns, float(rng.uniform(2, 40))))
    mismatches = greedy_worse = violations = 0
    hand_strict = None
    for k, (dets, anns, r) in enumerate(fixtures):
        o = optimal_match(dets, anns, r).tp
        g = greedy_match(dets, anns, r).tp
        mismatches += o != _brute_max_matching(dets, anns, r)
        violations += g > o
        greedy_worse += g < o
        if k == 0:
            hand_strict = (g, o) == (1, 2)
    ok = len(fixtures) >= 500 and mismatches == 0 and violations == 0 and greedy_worse >= 1 and hand_strict
    record(5, "optimal tp == brute force; greedy <= optimal with a strict case", ok,
           f"instances={len(fixtures)} mismatches={mismatches} greedy>opt={violations} strict={greedy_worse} hand-trace={hand_strict}")


# 6 ---------------------------------------------------------------------------


def test_ac06_suppression_invariants():
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(0, 80))
        r = float(rng.uniform(1, 40))
        pts = rng.uniform(0, 300, size=(n, 2))
        if rng.random() < 0.3:
            # lattice points with an integer radius: exact ties and distances equal to r
            pts = np.round(pts / 10) * 10
            r = float(rng.choice([10, 20, 30, 50]))
        scores = np.round(rng.random(n), 1)
        slides = rng.choice(["a", "b"], size=n)
        dets = [SlideDetection(str(s), Point2D(float(x), float(y)), float(sc)) for (x, y), sc, s in zip(pts, scores, slides)]
        out = radius_suppress(dets, r)
        spread = all(
            math.hypot(p.center.x - q.center.x, p.center.y - q.center.y) > r
            for i, p in enumerate(out)
            for q in out[i + 1 :]
            if p.slide_id == q.slide_id
        )
        ok = spread and radius_suppress(out, r) == out and out == radius_suppress_naive(dets, r)
        bad += not ok
    record(6, "suppression: spacing > r, idempotent, grid == naive over 1000 sets", bad == 0, f"failures={bad}")


# 7 ---------------------------------------------------------------------------


def _split_manifest(counts):
    slides = []
    for d, n in enumerate(counts):
        for c in range(n):
            slides.append(slide(f"d{d}-c{c}", domain=f"dom{d}", case=f"d{d}-c{c}"))
    return DatasetManifest(tuple(slides))


def test_ac07_split_correctness():
    rng = np.random.default_rng(7)
    ratios = SplitRatios()
    failures = []
    for trial in range(1000):
        counts = [int(v) for v in rng.integers(1, 30, size=int(rng.integers(1, 5)))]
        m = _split_manifest(counts)
        seed = int(rng.integers(0, 2**31))
        a = stratified_split(m, ratios, seed)
        rep = verify_no_leakage(a, m)
        dev = max(
            abs(rep.per_domain[f"dom{d}"][s] - n * getattr(ratios, s)) for d, n in enumerate(counts) for s in SPLITS
        )
        if not rep.ok or dev >= 1 or stratified_split(m, ratios, seed) != a:
            failures.append(trial)
    hand = []
    for n, expected in ((10, (7, 2, 1)), (1, (1, 0, 0))):
        rep = verify_no_leakage(stratified_split(_split_manifest([n]), ratios, 0), _split_manifest([n]))
        hand.append(tuple(rep.per_domain["dom0"][s] for s in SPLITS) == expected)
    record(7, "stratified split: within 1 of n*ratio, no leakage, deterministic; 10->7/2/1, 1->1/0/0",
           not failures and all(hand), f"random failures={len(failures)} hand cases={hand}")


# 8 ---------------------------------------------------------------------------


def test_ac08_augmentation_exactness():
    rng = np.random.default_rng(8)
    img = rng.integers(0, 256, size=(380, 380, 3), dtype=np.uint8)
    pts = rng.uniform(0, 380, size=(50, 2))
    p = AnnotatedPatch(img, pts)
    # w - (w - x) can differ from x by one ulp, so points use the remap tolerance
    involution = all(
        np.array_equal(flip(flip(p, ax), ax).image, img) and np.max(np.abs(flip(flip(p, ax), ax).points - pts)) <= 1e-6
        for ax in ("horizontal", "vertical")
    )
    linear = resize(AnnotatedPatch(img, [(190.0, 190.0)]), 400).points.tolist() == [[200.0, 200.0]]
    cfg = AugmentConfig(seed=8)
    worst = 0.0
    for i in range(200):
        s = apply_pipeline(p, cfg, i)
        if len(s.patch.ids):
            worst = max(worst, float(np.max(np.abs(s.record.inverse(s.patch.points) - pts[s.patch.ids]))))
    records = [sample_transform(cfg, 380, i) for i in range(10_000)]
    hf = float(np.mean([r.hflip for r in records]))
    vf = float(np.mean([r.vflip for r in records]))
    ok = involution and linear and worst <= 1e-6 and abs(hf - 0.5) <= 0.02 and abs(vf - 0.5) <= 0.02
    record(8, "flip involution, 190->200 exact, inverse <= 1e-6 px, flip rate 0.5 +/- 0.02", ok,
           f"involution={involution} linear={linear} max_inverse_err={worst:.2e} hflip={hf:.4f} vflip={vf:.4f}")


# 9 ---------------------------------------------------------------------------


def test_ac09_ap_cases():
    g = [ann("g", "s", 10, 10)]
    perfect = ap_at_iou([det(10, 10, 0.9)], g)
    third = ap_at_iou([det(35, 10, 0.9)], g)  # 25 px shift of 50 px boxes: IoU = 1/3
    fp_first = ap_at_iou([det(500, 500, 0.9), det(10, 10, 0.8)], g)
    ok = perfect == 1.0 and third == 0.0 and fp_first == 0.5
    record(9, "AP cases 1.0 / IoU 1/3 rejected / FP-then-TP 0.5", ok, f"{perfect} / {third} / {fp_first}")


# 10 --------------------------------------------------------------------------


def test_ac10_tile_coverage():
    uncovered = []
    for w in range(380, 1001):
        plan = plan_tile_grid(Rect(0, 0, w, w), 380, 76)
        mask = np.zeros((w, w), dtype=bool)
        inside = True
        for t in plan.tiles:
            x, y = t.origin.x, t.origin.y
            inside &= x >= 0 and y >= 0 and x + t.width <= w and y + t.height <= w
            mask[int(y) : int(y) + t.height, int(x) : int(x) + t.width] = True
        if not (mask.all() and inside):
            uncovered.append(w)
    xs = sorted({int(t.origin.x) for t in plan_tile_grid(Rect(0, 0, 1000, 380), 380, 76).tiles})
    ok = not uncovered and xs == [0, 304, 608, 620]
    record(10, "tile grid covers every pixel for widths 380..1000; width 1000 -> [0, 304, 608, 620]", ok,
           f"uncovered widths={uncovered[:5]} origins={xs}")


# 11 --------------------------------------------------------------------------


def test_ac11_orchestrator_robustness(tmp_path):
    specs = [make_spec(f"slide{i % 4}", 380 * (i // 4), 0, 380, 380, "tile") for i in range(40)]
    blobs = {}
    once = True
    for par in (1, 4, 8):
        state = tmp_path / f"state{par}"
        state.mkdir()
        results = run_detector_pool(specs, worker_cmd("flaky.py", state), image_dir=tmp_path, parallelism=par, retry_limit=2)
        once &= sorted(r.patch_id for r in results) == sorted(s.patch_id for s in specs)
        once &= len({r.patch_id for r in results}) == len(results)
        # every patch crashed its worker exactly once before succeeding
        once &= len(list(state.iterdir())) == len(specs)
        out = tmp_path / f"det{par}.ndjson"
        write_detections(out, flatten(results))
        blobs[par] = out.read_bytes()
    identical = blobs[1] == blobs[4] == blobs[8]
    record(11, "flaky worker completes under retry_limit 2, exactly once, identical bytes at parallelism 1/4/8",
           once and identical, f"exactly_once={once} identical={identical}")


# 12 --------------------------------------------------------------------------


def test_ac12_real_data_smoke():
    midog, ccmct = os.environ.get("MIDOGPP_JSON"), os.environ.get("CCMCT_JSON")
    if not (midog or ccmct):
        line = "[SKIP] AC12 real-data smoke | set MIDOGPP_JSON and/or CCMCT_JSON to run"
        print(line)
        ACCEPTANCE_LINES.append(line)
        pytest.skip("real datasets not present")
    details, ok = [], True
    if midog:
        s = dataset_stats(import_point_annotations(midog, "midogpp", {1: "mitotic_figure", 2: "imposter"}).to_manifest())
        mf = s.per_label.get("mitotic_figure", 0)
        ok &= mf == 11937 and s.n_cases == 503
        details.append(f"MIDOG++ mf={mf} cases={s.n_cases}")
    if ccmct:
        s = dataset_stats(import_point_annotations(ccmct, "ccmct", {1: "mitotic_figure", 2: "imposter"}).to_manifest())
        mf = s.per_label.get("mitotic_figure", 0)
        ok &= mf > 40000
        details.append(f"CCMCT mf={mf}")
    record(12, "real-data import counts", ok, "; ".join(details))
