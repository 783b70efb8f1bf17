"""Command line entry point: ``mitokit <subcommand> [options]``.

Exit codes: 0 success, 1 validation error (bad config, arguments or input
data), 2 pipeline failure (detector pool errors, missing files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Sequence

from . import augment as aug
from .config import ConfigError, PipelineConfig, load_config, set_option
from .detect import (
    DetectorPoolError,
    OracleParams,
    flatten,
    oracle_detector,
    read_detections,
    run_detector_pool,
    write_detections,
)
from .evaluation import evaluate, slide_radii, threshold_sweep
from .manifest import (
    MITOTIC_FIGURE,
    DatasetManifest,
    dataset_stats,
    import_point_annotations,
    load_manifest,
    merge_manifests,
    save_manifest,
)
from .merge import lift_to_slide, read_slide_detections, suppress_per_slide, write_slide_detections
from .patchset import (
    INDEX_NAME,
    mine_hard_negative_patches,
    plan_negative_patches,
    plan_positive_patches,
    plan_slide_tiles,
    read_index,
    write_index,
    write_patch_set,
)
from .split import SplitAssignment, SplitRatios, stratified_split, verify_no_leakage
from .synthetic import synthetic_manifest

logger = logging.getLogger("mitokit")

PARALLELISM_ENV = "MITOKIT_MAX_PARALLELISM"
EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which means pipeline failure here
        raise UsageError(f"{self.prog}: {message}")


def _parallelism(requested: int) -> int:
    cap = os.environ.get(PARALLELISM_ENV)
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise ConfigError(f"{PARALLELISM_ENV} must be an integer, got {cap!r}", PARALLELISM_ENV) from None
    return max(1, requested)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}", item)
        set_option(cfg, key, _parse_value(value))
    return cfg


def _write_text(path: str | Path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def _label_map(text: str) -> dict[str, str]:
    out = {}
    for part in filter(None, text.split(",")):
        k, sep, v = part.partition("=")
        if not sep:
            raise UsageError(f"label map entries look like 1=mitotic_figure, got {part!r}")
        out[k.strip()] = v.strip()
    return out


# -- subcommands -------------------------------------------------------------


def cmd_ingest(args, cfg: PipelineConfig) -> int:
    out = args.manifest or cfg.paths.manifest
    result = import_point_annotations(
        args.coco,
        args.dataset_id,
        _label_map(args.label_map),
        box_format=args.box_format,
        default_mpp=args.default_mpp,
        image_root=args.image_root,
    )
    m = result.to_manifest()
    if args.append and Path(out).exists():
        m = merge_manifests(load_manifest(out), m)
    save_manifest(m, out)
    print(
        f"imported {len(result.slides)} slides, {len(result.annotations)} annotations "
        f"(skipped: {dict(result.skipped) or 0}) -> {out}"
    )
    return EXIT_OK


def cmd_stats(args, cfg: PipelineConfig) -> int:
    stats = dataset_stats(load_manifest(args.manifest or cfg.paths.manifest))
    if args.json:
        print(json.dumps(stats.as_dict(), indent=2, sort_keys=True))
    else:
        print(stats.format_table())
    return EXIT_OK


def cmd_split(args, cfg: PipelineConfig) -> int:
    m = load_manifest(args.manifest or cfg.paths.manifest)
    seed = cfg.split.seed if args.seed is None else args.seed
    ratios = SplitRatios(cfg.split.train, cfg.split.valid, cfg.split.test)
    assignment = stratified_split(m, ratios, seed)
    report = verify_no_leakage(assignment, m)
    out = args.out or cfg.paths.assignment
    assignment.save(out)
    print(f"{'domain':<32} {'train':>6} {'valid':>6} {'test':>6}")
    for domain, counts in report.per_domain.items():
        print(f"{domain[:32]:<32} {counts['train']:>6} {counts['valid']:>6} {counts['test']:>6}")
    print(f"leakage check: {'ok' if report.ok else 'FAILED ' + ', '.join(report.leaked_cases)} -> {out}")
    return EXIT_OK if report.ok else EXIT_FAILED


def _render_or_index(specs, out_dir: str, m: DatasetManifest, plan_only: bool, parallelism: int) -> None:
    if plan_only:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_index(Path(out_dir) / INDEX_NAME, specs)
    else:
        write_patch_set(out_dir, specs, m.slide_index(), parallelism=parallelism)


def cmd_patch(args, cfg: PipelineConfig) -> int:
    m = load_manifest(args.manifest or cfg.paths.manifest)
    p = cfg.patches
    specs = plan_positive_patches(m, p.train_size, p.jitter_max, p.seed)
    specs += plan_negative_patches(m, p.train_size, p.negative_count, p.negative_min_distance, p.seed)
    out = args.out or cfg.paths.patch_dir
    _render_or_index(specs, out, m, args.plan_only, _parallelism(args.parallelism or cfg.detector.parallelism))
    print(f"planned {len(specs)} patches -> {out}")
    return EXIT_OK


def cmd_mine_negatives(args, cfg: PipelineConfig) -> int:
    m = load_manifest(args.manifest or cfg.paths.manifest)
    p = cfg.patches
    n = p.hard_negative_count if args.n is None else args.n
    specs = mine_hard_negative_patches(m, n, p.hard_negative_size, p.seed)
    out = args.out or cfg.paths.hard_negative_dir
    _render_or_index(specs, out, m, args.plan_only, _parallelism(cfg.detector.parallelism))
    print(f"mined {len(specs)} hard-negative patches -> {out}")
    return EXIT_OK


def cmd_augment(args, cfg: PipelineConfig) -> int:
    a = cfg.augment
    config = aug.AugmentConfig(a.hflip_prob, a.vflip_prob, tuple(a.resize_choices), a.crop_size, a.seed)
    src = args.src or cfg.paths.patch_dir
    out = args.out or cfg.paths.augment_dir
    specs = aug.augment_patch_set(src, out, config, a.copies if args.copies is None else args.copies)
    print(f"wrote {len(specs)} augmented patches -> {out}")
    return EXIT_OK


def _oracle_params(cfg: PipelineConfig, noise: str) -> OracleParams:
    o = cfg.detector.oracle
    if noise == "none":
        return OracleParams(0.0, 0.0, 0.0, o.seed)
    return OracleParams(o.jitter_sigma, o.drop_rate, o.fp_rate, o.seed)


def _infer(m: DatasetManifest, cfg: PipelineConfig, detector: str, noise: str, tile_dir: Path, index: str | None, parallelism: int):
    if index:
        specs = read_index(index)
        image_dir = Path(index).parent
    else:
        specs = plan_slide_tiles(m, cfg.patches.tile_size, cfg.patches.tile_overlap, with_annotations=True)
        image_dir = tile_dir
        tile_dir.mkdir(parents=True, exist_ok=True)
        if detector == "worker":
            write_patch_set(tile_dir, specs, m.slide_index(), parallelism=parallelism)
        else:
            write_index(tile_dir / INDEX_NAME, specs)
    if detector == "oracle":
        found = oracle_detector(specs, _oracle_params(cfg, noise))
        dets = [d for s in sorted(specs, key=lambda s: (s.slide_id, s.patch_id)) for d in sorted(found[s.patch_id], key=lambda d: (-d.score, d.center.x, d.center.y))]
    else:
        d = cfg.detector
        if not d.worker_command:
            raise ConfigError("detector.worker_command is empty; set it or use --detector oracle", "detector.worker_command")
        results = run_detector_pool(specs, d.worker_command, image_dir, parallelism, d.retry_limit, d.timeout)
        dets = flatten(results)
    return specs, dets


def cmd_infer(args, cfg: PipelineConfig) -> int:
    m = load_manifest(args.manifest or cfg.paths.manifest)
    tile_dir = Path(args.tile_dir or cfg.paths.tile_dir)
    specs, dets = _infer(m, cfg, args.detector, args.noise, tile_dir, args.index, _parallelism(args.parallelism or cfg.detector.parallelism))
    out = args.out or cfg.paths.detections
    write_detections(out, dets)
    print(f"{len(dets)} detections over {len(specs)} patches -> {out}")
    return EXIT_OK


def _merge(m: DatasetManifest, specs, dets, radius_microns: float, radius_px: float | None):
    lifted = lift_to_slide(dets, {s.patch_id: s for s in specs})
    radius = radius_px if radius_px is not None else slide_radii(m, radius_microns)
    return suppress_per_slide(lifted, radius)


def cmd_merge(args, cfg: PipelineConfig) -> int:
    m = load_manifest(args.manifest or cfg.paths.manifest)
    index = args.index or str(Path(cfg.paths.tile_dir) / INDEX_NAME)
    kept = _merge(m, read_index(index), read_detections(args.detections or cfg.paths.detections), cfg.eval.radius_microns, args.radius_px)
    out = args.out or cfg.paths.slide_detections
    write_slide_detections(out, kept)
    print(f"{len(kept)} slide detections after suppression -> {out}")
    return EXIT_OK


def _eval_common(args, cfg: PipelineConfig):
    m = load_manifest(args.manifest or cfg.paths.manifest)
    dets = read_slide_detections(args.detections or cfg.paths.slide_detections)
    split = args.split if args.split is not None else cfg.eval.split
    assignment = SplitAssignment.load(args.assignment or cfg.paths.assignment) if split else None
    return m, dets, split, assignment


def cmd_eval(args, cfg: PipelineConfig) -> int:
    m, dets, split, assignment = _eval_common(args, cfg)
    e = cfg.eval
    report = evaluate(
        dets,
        m,
        assignment,
        split,
        e.radius_microns,
        e.threshold if args.threshold is None else args.threshold,
        mode=e.mode,
        ignore_labels=e.ignore_labels,
        compute_ap=args.ap,
        box_half_size=e.box_half_size,
    )
    out = args.out or cfg.paths.report
    report.save(out)
    print(report.format_table())
    return EXIT_OK


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    m, dets, split, assignment = _eval_common(args, cfg)
    scope = set(m.slide_index())
    if split:
        scope = {sid for sid, sp in assignment.split_of_slide(m).items() if sp == split}
    gt = [a for a in m.annotations if a.slide_id in scope and a.label == MITOTIC_FIGURE]
    dets = [d for d in dets if d.slide_id in scope]
    result = threshold_sweep(dets, gt, slide_radii(m, cfg.eval.radius_microns, scope), cfg.eval.thresholds)
    out = args.out or cfg.paths.sweep
    _write_text(out, json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    print(result.format_table())
    print(f"best threshold {result.best_threshold:g} (F1 {result.best_f1:.4f})")
    return EXIT_OK


def cmd_run_e2e(args, cfg: PipelineConfig) -> int:
    work = Path(args.out_dir)
    work.mkdir(parents=True, exist_ok=True)
    paths = cfg.paths
    if args.manifest:
        m = load_manifest(args.manifest)
    else:
        images = work / "slides" if args.detector == "worker" else None
        m = synthetic_manifest(seed=args.seed, image_dir=images)
    save_manifest(m, work / paths.manifest)
    parallelism = _parallelism(args.parallelism or cfg.detector.parallelism)
    specs, dets = _infer(m, cfg, args.detector, args.noise, work / paths.tile_dir, None, parallelism)
    write_detections(work / paths.detections, dets)
    kept = _merge(m, specs, dets, cfg.eval.radius_microns, None)
    write_slide_detections(work / paths.slide_detections, kept)
    e = cfg.eval
    report = evaluate(kept, m, radius_microns=e.radius_microns, threshold=e.threshold, mode=e.mode, ignore_labels=e.ignore_labels, compute_ap=True, box_half_size=e.box_half_size)
    report.save(work / paths.report)
    print(report.format_table())
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mitokit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="import a COCO-like annotation file")
    p.add_argument("--coco", required=True)
    p.add_argument("--dataset-id", required=True)
    p.add_argument("--label-map", default="1=mitotic_figure,2=imposter")
    p.add_argument("--box-format", choices=("xyxy", "xywh"), default="xyxy")
    p.add_argument("--default-mpp", type=float)
    p.add_argument("--image-root")
    p.add_argument("--manifest")
    p.add_argument("--append", action="store_true", help="merge into an existing manifest")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", parents=[common], help="dataset summary")
    p.add_argument("--manifest")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", parents=[common], help="case-level train/valid/test split")
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    for name, func, helptext in (
        ("patch", cmd_patch, "plan and render training patches"),
        ("mine-negatives", cmd_mine_negatives, "hard negatives from necrosis regions"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--manifest")
        p.add_argument("--out")
        p.add_argument("--plan-only", action="store_true", help="write the index without rendering pixels")
        if name == "patch":
            p.add_argument("--parallelism", type=int)
        else:
            p.add_argument("--n", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("augment", parents=[common], help="offline augmentation of a patch set")
    p.add_argument("--src")
    p.add_argument("--out")
    p.add_argument("--copies", type=int)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("infer", parents=[common], help="run a detector over tiles or a patch set")
    p.add_argument("--manifest")
    p.add_argument("--index", help="existing patch index to run on instead of tiling slides")
    p.add_argument("--tile-dir")
    p.add_argument("--detector", choices=("oracle", "worker"), default="worker")
    p.add_argument("--noise", choices=("none", "config"), default="config")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("merge", parents=[common], help="lift to slide frame and suppress duplicates")
    p.add_argument("--manifest")
    p.add_argument("--index")
    p.add_argument("--detections")
    p.add_argument("--radius-px", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_merge)

    for name, func in (("eval", cmd_eval), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, parents=[common], help="point-matched evaluation" if name == "eval" else "F1 over a threshold grid")
        p.add_argument("--manifest")
        p.add_argument("--detections")
        p.add_argument("--assignment")
        p.add_argument("--split", choices=("train", "valid", "test"))
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--threshold", type=float)
            p.add_argument("--ap", action="store_true", help="also compute AP@0.5")
        p.set_defaults(func=func)

    p = sub.add_parser("run-e2e", parents=[common], help="tile -> infer -> merge -> eval")
    p.add_argument("--manifest", help="real manifest; a synthetic one is generated when omitted")
    p.add_argument("--detector", choices=("oracle", "worker"), default="oracle")
    p.add_argument("--noise", choices=("none", "config"), default="config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--out-dir", default="e2e")
    p.set_defaults(func=cmd_run_e2e)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, cat, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            return args.func(args, cfg)
    except (DetectorPoolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ConfigError as exc:
        print(f"config error ({exc.key}): {exc}" if exc.key else f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
