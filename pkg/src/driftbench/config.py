"""Run configuration: strict JSON parsing, defaults and a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CACHE_ENV = "DRIFTBENCH_CACHE"
# keys that change where/how fast a run happens but not its results
OPERATIONAL_KEYS = ("output_dir", "cache_dir", "workers")

MODEL_TYPES = ("identity", "blur", "quantize", "permutation", "directory")
EXTRACTOR_BACKENDS = {
    "depth": ("gradient", "subprocess"),
    "seg": ("subprocess",),
    "face": ("subprocess",),
    "clip": ("toy", "subprocess"),
    "dinov2": ("toy", "subprocess"),
    "lpips": ("toy",),
    "rfid": ("pixelpca", "pooled"),
}


class ConfigError(Exception):
    pass


@dataclass
class SyntheticSet:
    n: int = 64
    side: int = 64
    seed: int = 0


@dataclass
class ModelSpec:
    name: str
    type: str
    sigma: float | None = None
    levels: int | None = None
    seed: int | None = None
    path: str | None = None
    reported: dict[str, float] = field(default_factory=dict)


@dataclass
class CannyParams:
    blur_sigma: float = 1.0
    low: float = 0.1
    high: float = 0.2


@dataclass
class ExtractorSpec:
    """``backend`` selects a native implementation or ``subprocess``."""

    backend: str
    command: list[str] | None = None
    timeout: float = 60.0
    num_classes: int | None = None
    resolution: int | None = None
    seed: int = 0
    dim: int = 64
    n_components: int = 16
    pool_side: int = 8
    sigma: float = 1.0
    version: str = "0"
    reentrant: bool = False


def _default_extractors() -> dict[str, ExtractorSpec]:
    return {"depth": ExtractorSpec("gradient"), "rfid": ExtractorSpec("pixelpca")}


@dataclass
class RunConfig:
    models: list[ModelSpec]
    reference_dir: str | None = None
    synthetic: SyntheticSet | None = None
    side: int = 256
    metrics: list[str] = field(default_factory=lambda: [
        "rFID", "PSNR", "SSIM", "LPIPS", "Canny", "Depth", "Seg", "Spatial",
        "Identity", "Face@R", "CLIP", "DINOv2"])
    canny: CannyParams = field(default_factory=CannyParams)
    extractors: dict[str, ExtractorSpec] = field(default_factory=_default_extractors)
    cache_dir: str | None = None
    output_dir: str = "driftbench_out"
    seed: int = 0
    workers: int = 1
    correlate: bool = True
    heatmap: bool = False

    def validate(self) -> "RunConfig":
        from .metrics import COMPUTED_METRICS, REPORTED_METRICS

        if not self.models:
            raise ConfigError("at least one model is required")
        if (self.reference_dir is None) == (self.synthetic is None):
            raise ConfigError("set exactly one of reference_dir or synthetic")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate model names in {names}")
        for m in self.models:
            if m.type not in MODEL_TYPES:
                raise ConfigError(f"model {m.name!r}: unknown type {m.type!r}")
            if m.type == "blur" and (m.sigma is None or m.sigma < 0):
                raise ConfigError(f"model {m.name!r}: blur needs sigma >= 0")
            if m.type == "quantize" and (m.levels is None or m.levels < 2):
                raise ConfigError(f"model {m.name!r}: quantize needs levels >= 2")
            if m.type == "directory" and not m.path:
                raise ConfigError(f"model {m.name!r}: directory models need a path")
            bad = set(m.reported) - set(REPORTED_METRICS)
            if bad:
                raise ConfigError(f"model {m.name!r}: unknown reported metrics {sorted(bad)}")
        unknown = set(self.metrics) - set(COMPUTED_METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}")
        for key, spec in self.extractors.items():
            if key not in EXTRACTOR_BACKENDS:
                raise ConfigError(f"unknown extractor slot {key!r}")
            if spec.backend not in EXTRACTOR_BACKENDS[key]:
                raise ConfigError(f"extractor {key!r}: backend must be one of {EXTRACTOR_BACKENDS[key]}")
            if spec.backend == "subprocess" and not spec.command:
                raise ConfigError(f"extractor {key!r}: subprocess backend needs a command")
            if key == "seg" and (spec.num_classes is None or spec.num_classes < 2):
                raise ConfigError("extractor 'seg' needs num_classes >= 2")
        if self.synthetic is not None and (self.synthetic.n < 2 or self.synthetic.side < 32):
            raise ConfigError("synthetic set needs n >= 2 and side >= 32")
        if self.side < 32:
            raise ConfigError("side must be >= 32")
        if not 0 < self.canny.low < self.canny.high <= 1:
            raise ConfigError("canny thresholds need 0 < low < high <= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        for key in OPERATIONAL_KEYS:
            d.pop(key)
        return hash_dict(d)

    def resolved_cache_dir(self) -> Path | None:
        root = self.cache_dir or os.environ.get(CACHE_ENV)
        return Path(root) if root else None


def hash_dict(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, data: Any, where: str):
    """Instantiate dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _convert(cls, key, value, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _convert(cls, key, value, where):
    nested = {
        (RunConfig, "synthetic"): SyntheticSet,
        (RunConfig, "canny"): CannyParams,
    }
    if (cls, key) in nested:
        return None if value is None else _build(nested[(cls, key)], value, where)
    if cls is RunConfig and key == "models":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_build(ModelSpec, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if cls is RunConfig and key == "extractors":
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return {k: _build(ExtractorSpec, v, f"{where}.{k}") for k, v in value.items()}
    return value


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config").validate()


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        data = {**data, **overrides}
    return config_from_dict(data)
