"""End-to-end orchestration: references -> pairs -> metrics -> reports."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .analysis import MetricMatrix, correlation_matrix, emit_reports, load_table4_fixture
from .config import ExtractorSpec, ModelSpec, RunConfig
from .core import DataError, ImagePair, ImageTensor, ModelRecord, PairResult, load_dataset, \
    make_pairs, roundtrip_dataset
from .metrics import METRIC_DIRECTIONS, FeatureStats, MetricVector, PixelPCA, \
    ToyConvBackend, compare_conditions, drift_record, feature_stats, frechet_distance, \
    identity_similarity, mean_metric, perceptual_distance, psnr, spatial_aggregate, ssim
from .projectors import CANNY_DEFAULTS, ConditionMap, Projector, SubprocessExtractor, ToyEmbedding, \
    make_adapter_projector, make_canny, make_embedding_projector, make_gradient
from .synthetic import SyntheticAE, blur_ae, identity_ae, make_permutation_ae, make_synthetic_images, \
    quantize_ae

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_EXTRACTOR = 0, 2, 3, 4

METHOD_NOTES = {
    "canny": "luma grayscale, Gaussian blur (5x5 at sigma=1), Sobel, 4-direction NMS, "
             "hysteresis on max-normalized magnitude",
    "depth": "per-image min-max normalization before L1",
    "seg": "per-pixel label mismatch rate",
    "face_recall": "reconstruction detections / reference detections",
    "quantization": "metrics on float reconstructions; 8-bit only when persisted",
    "resize": "center crop to largest square, PIL bilinear resize",
}


# -- feature cache ---------------------------------------------------------------

class FeatureCache:
    """On-disk cache of per-image arrays keyed by extractor, stamp and content.

    Each entry stores a checksum of its payload; unreadable or mismatching
    entries are recomputed.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.hits = self.misses = self.invalid = 0

    def _path(self, extractor_id: str, stamp: dict, image: ImageTensor) -> Path:
        key = hashlib.sha256()
        key.update(json.dumps(stamp, sort_keys=True, default=str).encode())
        key.update(image.source_id.encode())
        key.update(np.ascontiguousarray(image.data).tobytes())
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in extractor_id)
        return self.root / "features" / safe / f"{key.hexdigest()}.npz"

    def get_or_compute(self, extractor_id: str, stamp: dict, image: ImageTensor,
                       fn: Callable[[ImageTensor], np.ndarray]) -> np.ndarray:
        path = self._path(extractor_id, stamp, image)
        if path.exists():
            try:
                with np.load(path) as z:
                    arr, digest = z["value"], str(z["digest"])
                if hashlib.sha256(arr.tobytes()).hexdigest() == digest:
                    self.hits += 1
                    return arr
                reason = "checksum mismatch"
            except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError) as exc:
                reason = f"{type(exc).__name__}"
            logger.warning("invalid cache entry %s (%s); recomputing", path.name, reason)
            self.invalid += 1
        self.misses += 1
        arr = np.ascontiguousarray(np.asarray(fn(image), dtype=np.float64))
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, value=arr, digest=hashlib.sha256(arr.tobytes()).hexdigest())
        tmp.replace(path)
        return arr


def cache_features(images: Sequence[ImageTensor], extractor: Callable[[ImageTensor], np.ndarray],
                   cache_dir, extractor_id: str,
                   stamp: dict | None = None) -> tuple[np.ndarray, FeatureCache]:
    """Per-image features through the cache; returns (stacked features, cache)."""
    cache = FeatureCache(cache_dir)
    feats = [cache.get_or_compute(extractor_id, stamp or {}, im, extractor) for im in images]
    return np.stack(feats), cache


def cached_projector(projector: Projector, cache: FeatureCache | None) -> Projector:
    if cache is None:
        return projector

    stamp = projector.stamp()
    kind = projector.kind

    def _cached(image):
        arr = cache.get_or_compute(projector.name, stamp, image, lambda im: projector(im).data)
        return ConditionMap(arr, projector.name, kind)

    return Projector(projector.name, kind, _cached, projector.comparison, projector.lipschitz_bound,
                     dict(projector.params))


# -- building blocks from config ------------------------------------------------

def build_adapter(spec: ModelSpec, references: Sequence[ImageTensor]) -> SyntheticAE | None:
    if spec.type == "identity":
        return identity_ae(spec.name)
    if spec.type == "blur":
        return blur_ae(spec.sigma, spec.name)
    if spec.type == "quantize":
        return quantize_ae(spec.levels, spec.name)
    if spec.type == "permutation":
        return make_permutation_ae(references, spec.seed or 0, spec.name)
    return None


def _subprocess(slot: str, spec: ExtractorSpec, kind: str) -> SubprocessExtractor:
    return SubprocessExtractor(slot, kind, list(spec.command), spec.timeout, spec.version, spec.reentrant)


def build_projectors(cfg: RunConfig) -> dict[str, Projector]:
    """Projectors keyed by result column (Canny, Depth, Seg, CLIP, DINOv2)."""
    out = {"Canny": make_canny(cfg.canny.blur_sigma, cfg.canny.low, cfg.canny.high)}
    ex = cfg.extractors
    if "depth" in ex:
        spec = ex["depth"]
        if spec.backend == "gradient":
            out["Depth"] = make_gradient(spec.sigma, name="depth")
        else:
            out["Depth"] = make_adapter_projector(_subprocess("depth", spec, "map"), "depth", spec.resolution)
    if "seg" in ex:
        spec = ex["seg"]
        out["Seg"] = make_adapter_projector(_subprocess("seg", spec, "labels"), "seg", spec.resolution,
                                            spec.num_classes)
    for slot, column in (("clip", "CLIP"), ("dinov2", "DINOv2")):
        if slot in ex:
            spec = ex[slot]
            adapter = (ToyEmbedding(spec.dim, spec.seed, slot) if spec.backend == "toy"
                       else _subprocess(slot, spec, "vector"))
            out[column] = make_embedding_projector(adapter, slot)
    return out


def build_rfid_extractor(spec: ExtractorSpec, references: Sequence[ImageTensor]):
    if spec.backend == "pixelpca":
        return PixelPCA(min(spec.n_components, max(len(references) - 1, 1)), spec.pool_side).fit(references)
    return PooledPixels(spec.pool_side)


class PooledPixels:
    """Average-pooled RGB pixels as a fit-free feature vector."""

    def __init__(self, pool_side: int = 8):
        self.pool_side = pool_side
        self.name = f"pooled-{pool_side}"

    def __call__(self, images: Sequence[ImageTensor]) -> np.ndarray:
        s = self.pool_side
        return np.stack([im.data.reshape(3, s, im.side // s, s, im.side // s).mean(axis=(2, 4)).ravel()
                         for im in images])


def load_references(cfg: RunConfig) -> tuple[list[ImageTensor], dict[str, str]]:
    if cfg.synthetic is not None:
        s = cfg.synthetic
        return make_synthetic_images(s.n, s.side, s.seed), {}
    result = load_dataset(cfg.reference_dir, cfg.side, workers=cfg.workers)
    return result.images, result.errors


# -- evaluate ----------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = __version__
    timings: dict = field(default_factory=dict)
    exclusions: dict[str, dict[str, int]] = field(default_factory=dict)
    stamps: dict = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)
    load_errors: dict[str, str] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = {"config_hash": self.config_hash, "tool_version": self.tool_version,
             "exclusions": self.exclusions, "stamps": self.stamps, "files": self.files,
             "load_errors": self.load_errors}
        if include_timings:
            d["timings"] = self.timings
        return d


def evaluate_pairs(pairs: Sequence[ImagePair], projectors: dict[str, Projector], cfg: RunConfig,
                   references: Sequence[ImageTensor], rfid_extractor=None, ref_stats=None,
                   lpips_backend=None, face_adapter=None) -> tuple[MetricVector, dict[str, int]]:
    """All enabled metrics for one model's pairs."""
    wanted = set(cfg.metrics)
    mv = MetricVector()
    excluded = {}
    if not pairs:
        for m in cfg.metrics:
            mv.set(m, None, "no pairs")
        return mv, excluded
    if "PSNR" in wanted:
        mv.set("PSNR", mean_metric(pairs, psnr))
    if "SSIM" in wanted:
        mv.set("SSIM", mean_metric(pairs, ssim))
    if "LPIPS" in wanted:
        if lpips_backend is None:
            mv.set("LPIPS", None, "no extractor")
        else:
            mv.set("LPIPS", mean_metric(pairs, lambda p: perceptual_distance(p, lpips_backend)))
    if "rFID" in wanted:
        if rfid_extractor is None or len(pairs) < 2:
            mv.set("rFID", None, "no extractor" if rfid_extractor is None else "fewer than 2 pairs")
        else:
            rec_stats = feature_stats([p.reconstruction for p in pairs], rfid_extractor)
            mv.set("rFID", frechet_distance(ref_stats, rec_stats))
    records = {}
    for column in ("Canny", "Depth", "Seg", "CLIP", "DINOv2"):
        needed = column in wanted or (column in ("Canny", "Depth", "Seg") and "Spatial" in wanted)
        if not needed:
            continue
        proj = projectors.get(column)
        if proj is None:
            if column in wanted:
                mv.set(column, None, "no extractor")
            continue
        # external extractors are run one image at a time
        workers = cfg.workers if "extractor" not in proj.params else 1
        rec = drift_record(pairs, proj, workers)
        excluded[column] = rec.excluded
        if rec.per_pair:
            records[column] = rec
            if column in wanted:
                mv.set(column, rec.mean)
        elif column in wanted:
            mv.set(column, None, "all pairs excluded")
    if "Spatial" in wanted:
        agg = spatial_aggregate(records.get("Canny"), records.get("Depth"), records.get("Seg"))
        missing = [c for c in ("Canny", "Depth", "Seg") if c not in records]
        mv.set("Spatial", agg, f"missing {', '.join(missing)}")
    if "Identity" in wanted or "Face@R" in wanted:
        if face_adapter is None:
            for m in ("Identity", "Face@R"):
                if m in wanted:
                    mv.set(m, None, "no extractor")
        else:
            res = identity_similarity(pairs, face_adapter)
            excluded["face_adapter_errors"] = res.adapter_errors
            if "Identity" in wanted:
                mv.set("Identity", res.mean_cos, res.reason or "no faces")
            if "Face@R" in wanted:
                mv.set("Face@R", res.face_recall, res.reason or "no faces")
    return mv, excluded


def _model_pairs(spec: ModelSpec, references, cfg: RunConfig) -> PairResult:
    adapter = build_adapter(spec, references)
    cache = cfg.resolved_cache_dir()
    if adapter is not None:
        recon_cache = cache / "reconstructions" if cache else None
        return roundtrip_dataset(adapter, references, recon_cache, cfg.workers)
    recons = load_dataset(spec.path, cfg.side, workers=cfg.workers)
    result = make_pairs(references, recons.images)
    result.failures.update(recons.errors)
    return result


def cmd_evaluate(cfg: RunConfig, write: bool = True) -> tuple[MetricMatrix, RunManifest]:
    """Evaluate every configured model and (optionally) write the report set."""
    t0 = time.perf_counter()
    config_hash = cfg.config_hash()
    manifest = RunManifest(config_hash)
    references, load_errors = load_references(cfg)
    references = sorted(references, key=lambda im: im.source_id)
    manifest.load_errors = load_errors
    manifest.timings["load"] = time.perf_counter() - t0

    cache_root = cfg.resolved_cache_dir()
    cache = FeatureCache(cache_root) if cache_root else None
    projectors = {k: cached_projector(p, cache) for k, p in build_projectors(cfg).items()}
    ex = cfg.extractors
    rfid_extractor = ref_stats = None
    if "rfid" in ex and "rFID" in cfg.metrics and len(references) >= 2:
        rfid_extractor = build_rfid_extractor(ex["rfid"], references)
        ref_stats = feature_stats(references, rfid_extractor)
    lpips_backend = ToyConvBackend(ex["lpips"].seed) if "lpips" in ex else None
    face_adapter = _subprocess("face", ex["face"], "faces") if "face" in ex else None

    manifest.stamps = {
        "projectors": {k: p.stamp() for k, p in projectors.items()},
        "rfid_extractor": getattr(rfid_extractor, "name", None),
        "lpips_backend": getattr(lpips_backend, "name", None),
        "face_extractor": ({"command": ex["face"].command, "version": ex["face"].version}
                           if "face" in ex else None),
        "ssim": {"window": 11, "sigma": 1.5, "K1": 0.01, "K2": 0.03, "max": 1.0},
        "canny_defaults": CANNY_DEFAULTS,
        "methods": METHOD_NOTES,
        "side": cfg.side,
    }

    records = []
    for spec in cfg.models:
        t = time.perf_counter()
        pairs = _model_pairs(spec, references, cfg)
        mv, excluded = evaluate_pairs(pairs.pairs, projectors, cfg, references, rfid_extractor,
                                      ref_stats, lpips_backend, face_adapter)
        excluded["roundtrip_failures"] = len(pairs.failures)
        excluded["unmatched"] = len(pairs.unmatched)
        manifest.exclusions[spec.name] = excluded
        manifest.timings[spec.name] = time.perf_counter() - t
        rec = ModelRecord(spec.name, None, dict(spec.reported), dict(mv.values))
        rec.validate(METRIC_DIRECTIONS)
        rec.absent = dict(mv.absent)
        rec.metadata = {"config_hash": config_hash, "n_pairs": len(pairs),
                        "type": spec.type, **({"sigma": spec.sigma} if spec.sigma is not None else {})}
        records.append(rec)

    columns = [m for m in METRIC_DIRECTIONS if m in cfg.metrics
               or any(m in r.reported_generation for r in records)]
    matrix = MetricMatrix.from_records(records, columns)
    corr = None
    if cfg.correlate and len(records) >= 3:
        corr = correlation_matrix(matrix, abs_mode=True)
    if cache is not None:
        # run-dependent, so it lives beside the timings rather than in the stamps
        manifest.timings["cache"] = {"hits": cache.hits, "misses": cache.misses, "invalid": cache.invalid}
    manifest.timings["total"] = time.perf_counter() - t0
    if write:
        write_run_outputs(cfg, matrix, corr, manifest)
    return matrix, manifest


def write_run_outputs(cfg: RunConfig, matrix: MetricMatrix, corr, manifest: RunManifest) -> list[Path]:
    out = Path(cfg.output_dir)
    meta = {"config_hash": manifest.config_hash, "tool_version": manifest.tool_version,
            "stamps": manifest.stamps}
    written = emit_reports(matrix, corr, out, heatmap=cfg.heatmap, extra_metadata=meta)
    lb = out / "leaderboard.md"
    lb.write_text(lb.read_text() + f"\nconfig_hash: `{manifest.config_hash}`\n")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest.files = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(written)}
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return written


# -- correlate -----------------------------------------------------------------------

def matrix_from_metrics_json(paths: Sequence) -> MetricMatrix:
    records = []
    for path in paths:
        doc = json.loads(Path(path).read_text())
        for m in doc["models"]:
            rec = ModelRecord(m["name"], None,
                              {k: float(v) for k, v in m.get("reported", {}).items()},
                              {k: float(v) for k, v in m.get("computed", {}).items()})
            rec.absent = m.get("metadata", {}).get("absent", {})
            rec.metadata = {k: v for k, v in m.get("metadata", {}).items() if k != "absent"}
            records.append(rec)
    return MetricMatrix.from_records(records)


def cmd_correlate(metrics_files: Sequence | None = None, fixture: str | None = None,
                  out_dir=None, abs_mode: bool = True, heatmap: bool = False):
    """Correlation matrix over metrics.json files or the bundled fixture."""
    if fixture is not None:
        if fixture != "table4":
            raise DataError(f"unknown fixture {fixture!r}")
        matrix = load_table4_fixture()
    elif metrics_files:
        matrix = matrix_from_metrics_json(metrics_files)
    else:
        raise DataError("nothing to correlate")
    if len(matrix.models) < 3:
        raise DataError(f"correlation needs at least 3 models, got {len(matrix.models)}")
    corr = correlation_matrix(matrix, abs_mode=abs_mode)
    if out_dir is not None:
        emit_reports(matrix, corr, out_dir, heatmap=heatmap,
                     extra_metadata={"source": fixture or [str(p) for p in metrics_files]})
    return matrix, corr


# -- score controlled generations ----------------------------------------------------

def load_condition_maps(directory, side: int | None = None) -> dict[str, np.ndarray]:
    """``<id>.npy`` (float, (H, W) or (1, H, W)) or ``<id>.png`` (8-bit gray) maps."""
    from PIL import Image

    maps = {}
    for p in sorted(Path(directory).iterdir()):
        if p.suffix == ".npy":
            arr = np.load(p).astype(np.float64)
        elif p.suffix.lower() == ".png":
            with Image.open(p) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        else:
            continue
        maps[p.stem] = arr.reshape((1,) + arr.shape[-2:])
    if not maps:
        raise DataError(f"no condition maps in {directory}")
    return maps


@dataclass
class ControlledScore:
    fid: float | None
    l1: float
    n: int
    unmatched: list[str] = field(default_factory=list)


def cmd_score_controlled(generated: Sequence[ImageTensor] | str, conditions: dict[str, np.ndarray] | str,
                         projector: Projector, reference_stats: FeatureStats | None = None,
                         extractor=None, side: int = 256) -> ControlledScore:
    """FID of generated images vs reference stats, and mean L1 between
    projector(generated) and the target condition maps."""
    if isinstance(generated, (str, Path)):
        generated = load_dataset(generated, side).images
    if isinstance(conditions, (str, Path)):
        conditions = load_condition_maps(conditions)
    gen = {im.source_id: im for im in generated}
    common = sorted(gen.keys() & conditions.keys())
    unmatched = sorted(gen.keys() ^ conditions.keys())
    if not common:
        raise DataError("no generated image matches a condition map")
    dists = []
    for sid in common:
        target = np.asarray(conditions[sid], dtype=np.float64)
        target = target.reshape((1,) + target.shape[-2:])
        dists.append(compare_conditions(projector(gen[sid]), ConditionMap(target, projector.name),
                                        projector.comparison))
    fid = None
    if reference_stats is not None and extractor is not None:
        fid = frechet_distance(reference_stats, feature_stats([gen[s] for s in common], extractor))
    return ControlledScore(fid, math.fsum(dists) / len(dists), len(common), unmatched)
