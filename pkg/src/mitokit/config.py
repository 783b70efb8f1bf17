"""Pipeline configuration: one JSON document, defaults matching the module defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


@dataclass
class PathsConfig:
    manifest: str = "manifest.json"
    assignment: str = "split.json"
    patch_dir: str = "patches"
    hard_negative_dir: str = "hard_negatives"
    augment_dir: str = "augmented"
    tile_dir: str = "tiles"
    detections: str = "detections.ndjson"
    slide_detections: str = "slide_detections.ndjson"
    report: str = "report.json"
    sweep: str = "sweep.json"


@dataclass
class SplitConfig:
    train: float = 0.7
    valid: float = 0.15
    test: float = 0.15
    seed: int = 0


@dataclass
class PatchConfig:
    train_size: int = 380
    jitter_max: int = 50
    negative_count: int = 0
    negative_min_distance: float = 100.0
    hard_negative_size: int = 360
    hard_negative_count: int = 5000
    tile_size: int = 380
    tile_overlap: int = 76
    seed: int = 0


@dataclass
class AugmentSection:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    resize_choices: list[int] = field(default_factory=lambda: [400, 500, 600])
    crop_size: int = 384
    seed: int = 0
    copies: int = 1


@dataclass
class OracleConfig:
    jitter_sigma: float = 2.0
    drop_rate: float = 0.2
    fp_rate: float = 2.0
    seed: int = 0


@dataclass
class DetectorConfig:
    worker_command: list[str] = field(default_factory=list)
    parallelism: int = 1
    retry_limit: int = 2
    timeout: float = 60.0
    oracle: OracleConfig = field(default_factory=OracleConfig)


@dataclass
class EvalConfig:
    radius_microns: float = 7.5
    threshold: float = 0.5
    box_half_size: float = 25.0
    thresholds: list[float] = field(default_factory=lambda: [round(0.05 * i, 2) for i in range(1, 20)])
    split: str | None = None
    ignore_labels: list[str] = field(default_factory=list)
    mode: str = "greedy"


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    patches: PatchConfig = field(default_factory=PatchConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(value: Any, current: Any, key: str) -> Any:
    if isinstance(current, bool) or isinstance(value, bool):
        if type(value) is not type(current):
            raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}", key)
        return value
    if isinstance(current, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(current, int) and isinstance(value, int):
        return value
    if isinstance(current, str) and isinstance(value, str):
        return value
    if isinstance(current, list) and isinstance(value, list):
        return list(value)
    if current is None and isinstance(value, str):
        return value
    raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}", key)


def _apply(obj: Any, doc: Mapping[str, Any], prefix: str) -> None:
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{prefix or 'config'}: expected an object", prefix)
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in doc.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigError(f"unknown config key {path!r}", path)
        current = getattr(obj, key)
        if value is None and "None" in str(fields[key].type):
            setattr(obj, key, None)
        elif dataclasses.is_dataclass(current):
            _apply(current, value, path)
        else:
            setattr(obj, key, _coerce(value, current, path))


def _check(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {message}", key)


def validate(cfg: PipelineConfig) -> PipelineConfig:
    """Range checks that the type coercion above cannot express."""
    s = cfg.split
    for k in ("train", "valid", "test"):
        _check(0.0 <= getattr(s, k) <= 1.0, f"split.{k}", "must lie in [0, 1]")
    _check(abs(s.train + s.valid + s.test - 1.0) <= 1e-9, "split", "train + valid + test must equal 1")
    p = cfg.patches
    for k in ("train_size", "hard_negative_size", "tile_size"):
        _check(getattr(p, k) > 0, f"patches.{k}", "must be positive")
    for k in ("jitter_max", "negative_count", "hard_negative_count", "tile_overlap"):
        _check(getattr(p, k) >= 0, f"patches.{k}", "must be non-negative")
    _check(p.tile_overlap < p.tile_size, "patches.tile_overlap", "must be smaller than patches.tile_size")
    a = cfg.augment
    for k in ("hflip_prob", "vflip_prob"):
        _check(0.0 <= getattr(a, k) <= 1.0, f"augment.{k}", "must lie in [0, 1]")
    _check(bool(a.resize_choices) and all(isinstance(v, int) and v > 0 for v in a.resize_choices),
           "augment.resize_choices", "must be a non-empty list of positive integers")
    _check(0 < a.crop_size <= min(a.resize_choices or [0]), "augment.crop_size", "must be positive and <= min(resize_choices)")
    _check(a.copies >= 0, "augment.copies", "must be non-negative")
    d = cfg.detector
    _check(all(isinstance(v, str) for v in d.worker_command), "detector.worker_command", "must be a list of strings")
    _check(d.parallelism >= 1, "detector.parallelism", "must be >= 1")
    _check(d.retry_limit >= 0, "detector.retry_limit", "must be >= 0")
    _check(d.timeout > 0, "detector.timeout", "must be positive")
    o = d.oracle
    _check(o.jitter_sigma >= 0, "detector.oracle.jitter_sigma", "must be >= 0")
    _check(0.0 <= o.drop_rate <= 1.0, "detector.oracle.drop_rate", "must lie in [0, 1]")
    _check(o.fp_rate >= 0, "detector.oracle.fp_rate", "must be >= 0")
    e = cfg.eval
    _check(e.radius_microns > 0, "eval.radius_microns", "must be positive")
    _check(0.0 <= e.threshold <= 1.0, "eval.threshold", "must lie in [0, 1]")
    _check(e.box_half_size > 0, "eval.box_half_size", "must be positive")
    _check(bool(e.thresholds) and all(isinstance(t, (int, float)) and 0 <= t <= 1 for t in e.thresholds),
           "eval.thresholds", "must be a non-empty list of numbers in [0, 1]")
    _check(e.split in (None, "train", "valid", "test"), "eval.split", "must be train, valid, test or null")
    _check(e.mode in ("greedy", "optimal"), "eval.mode", "must be greedy or optimal")
    return cfg


def config_from_dict(doc: Mapping[str, Any]) -> PipelineConfig:
    cfg = PipelineConfig()
    _apply(cfg, doc, "")
    return validate(cfg)


def schema_path() -> Path:
    """Location of the JSON schema documenting the config file."""
    return Path(__file__).with_name("schemas") / "pipeline_config.schema.json"


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(doc)


def set_option(cfg: PipelineConfig, dotted: str, value: Any) -> None:
    """Override one dotted key, e.g. ``set_option(cfg, "eval.threshold", 0.4)``."""
    parts = dotted.split(".")
    doc: dict[str, Any] = {parts[-1]: value}
    for p in reversed(parts[:-1]):
        doc = {p: doc}
    _apply(cfg, doc, "")
    validate(cfg)
