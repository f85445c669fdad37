"""Image containers, dataset ingestion and reference/reconstruction pairing.

Images live internally as float64 arrays of shape ``(3, H, W)`` with values in
``[0, 1]`` (so ``MAX = 1.0`` for PSNR/SSIM).  Quantization to 8 bits only
happens when something is written to disk; a value ``v`` on the 255 scale maps
to ``v / 255`` internally.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

COLOR_LAYOUT = "RGB"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_SIDE = 32


class DataError(Exception):
    """Fatal problem with input data (empty dataset, no matches, duplicates)."""


@dataclass(frozen=True, eq=False)
class ImageTensor:
    data: np.ndarray
    source_id: str
    color_layout: str = COLOR_LAYOUT

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) image, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"{self.source_id}: non-finite pixel values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError(f"{self.source_id}: values outside [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def side(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "ImageTensor":
        return ImageTensor(np.clip(data, 0.0, 1.0), self.source_id, self.color_layout)

    def to_uint8(self) -> np.ndarray:
        """HWC uint8 array, rounded to nearest."""
        return np.round(self.data.transpose(1, 2, 0) * 255.0).astype(np.uint8)

    def __repr__(self):
        return f"ImageTensor({self.source_id!r}, shape={self.shape})"


@dataclass(frozen=True)
class ImagePair:
    reference: ImageTensor
    reconstruction: ImageTensor

    def __post_init__(self):
        if self.reference.source_id != self.reconstruction.source_id:
            raise ValueError(
                f"source_id mismatch: {self.reference.source_id!r} vs "
                f"{self.reconstruction.source_id!r}"
            )
        if self.reference.shape != self.reconstruction.shape:
            raise ValueError(
                f"{self.source_id}: shape mismatch {self.reference.shape} vs "
                f"{self.reconstruction.shape}"
            )

    @property
    def source_id(self) -> str:
        return self.reference.source_id


@dataclass(frozen=True)
class LatentCode:
    data: np.ndarray
    downsample_factor: int = 1

    def __post_init__(self):
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be a positive integer")
        if np.ndim(self.data) != 3:
            raise ValueError(f"latent must be (C, H, W), got {np.shape(self.data)}")

    def image_side(self) -> int:
        return self.data.shape[1] * self.downsample_factor


@dataclass(frozen=True)
class AutoencoderAdapter:
    """An encoder/decoder pair.  ``roundtrip`` is ``decode(encode(x))``."""

    name: str
    encode: Callable[[ImageTensor], LatentCode]
    decode: Callable[[LatentCode], np.ndarray]

    def roundtrip(self, image: ImageTensor) -> ImageTensor:
        latent = self.encode(image)
        if latent.image_side() != image.side:
            raise ValueError(
                f"{self.name}: latent {latent.data.shape} x{latent.downsample_factor} "
                f"inconsistent with image side {image.side}"
            )
        out = np.asarray(self.decode(latent), dtype=np.float64)
        if out.shape != image.shape:
            raise ValueError(f"{self.name}: decoded shape {out.shape} != {image.shape}")
        return image.with_data(out)


@dataclass
class ModelRecord:
    name: str
    adapter: AutoencoderAdapter | None = None
    reported_generation: dict[str, float] = field(default_factory=dict)
    computed: dict[str, float] = field(default_factory=dict)

    def validate(self, registry: Iterable[str]) -> None:
        overlap = set(self.reported_generation) & set(self.computed)
        if overlap:
            raise ValueError(f"{self.name}: metrics both reported and computed: {sorted(overlap)}")
        unknown = set(self.computed) - set(registry)
        if unknown:
            raise ValueError(f"{self.name}: unregistered metrics {sorted(unknown)}")


def center_crop_resize(img: Image.Image, side: int) -> np.ndarray:
    """Crop the largest centered square, then bilinear-resize to ``side``.

    Returns a CHW float array in [0, 1].  PIL's bilinear filter uses
    pixel-center sampling (no corner alignment).
    """
    img = img.convert(COLOR_LAYOUT)
    w, h = img.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    img = img.crop((left, top, left + s, top + s))
    if s != side:
        img = img.resize((side, side), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0


def load_image(path: str | os.PathLike, side: int = 256, source_id: str | None = None) -> ImageTensor:
    with Image.open(path) as img:
        data = center_crop_resize(img, side)
    return ImageTensor(data, source_id or Path(path).stem)


@dataclass
class LoadResult:
    images: list[ImageTensor]
    errors: dict[str, str]

    def __iter__(self):
        return iter(self.images)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]


def _image_files(root: Path) -> list[Path]:
    return sorted(
        (p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.stem,
    )


def load_dataset(root_path: str | os.PathLike, side: int = 256, crop: str = "center",
                 workers: int = 1) -> LoadResult:
    """Load every PNG/JPEG below ``root_path`` as a canonical ImageTensor.

    Unreadable files are recorded in ``errors`` and skipped.  Results are
    ordered by source_id (the filename stem).
    """
    if crop != "center":
        raise ValueError(f"unsupported crop mode {crop!r}")
    if side < MIN_SIDE:
        raise ValueError(f"side must be >= {MIN_SIDE}, got {side}")
    root = Path(root_path)
    files = _image_files(root)
    if not files:
        raise DataError(f"no images found under {root}")
    stems = [p.stem for p in files]
    if len(set(stems)) != len(stems):
        dup = sorted({s for s in stems if stems.count(s) > 1})
        raise DataError(f"duplicate source_id(s) under {root}: {dup[:5]}")

    def _load(path):
        try:
            return load_image(path, side), None
        except Exception as exc:  # decoding failures are per-file
            return None, f"{type(exc).__name__}: {exc}"

    results = _map_ordered(_load, files, workers)
    images, errors = [], {}
    for path, (image, err) in zip(files, results):
        if err is None:
            images.append(image)
        else:
            logger.warning("skipping %s: %s", path, err)
            errors[path.stem] = err
    if not images:
        raise DataError(f"no decodable images under {root}")
    return LoadResult(images, errors)


def save_image(image: ImageTensor, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.to_uint8(), mode=COLOR_LAYOUT).save(path, format="PNG")
    return path


@dataclass
class PairResult:
    pairs: list[ImagePair]
    unmatched: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def _index_by_id(images: Sequence[ImageTensor], what: str) -> dict[str, ImageTensor]:
    out = {}
    for im in images:
        if im.source_id in out:
            raise DataError(f"duplicate source_id {im.source_id!r} in {what}")
        out[im.source_id] = im
    return out


def make_pairs(references: Sequence[ImageTensor],
               reconstructions: Sequence[ImageTensor]) -> PairResult:
    if not references or not reconstructions:
        raise DataError("make_pairs needs nonempty reference and reconstruction sets")
    refs = _index_by_id(references, "references")
    recs = _index_by_id(reconstructions, "reconstructions")
    common = sorted(refs.keys() & recs.keys())
    if not common:
        raise DataError("zero matches between references and reconstructions")
    unmatched = sorted(refs.keys() ^ recs.keys())
    if unmatched:
        logger.info("%d unmatched source_ids", len(unmatched))
    return PairResult([ImagePair(refs[k], recs[k]) for k in common], unmatched)


def roundtrip_dataset(adapter: AutoencoderAdapter, references: Sequence[ImageTensor],
                      cache_dir: str | os.PathLike | None = None, workers: int = 1) -> PairResult:
    """Pair each reference with ``adapter.roundtrip(reference)``.

    With ``cache_dir`` set, reconstructions are also written to
    ``<cache_dir>/<adapter.name>/<source_id>.png``.  The returned pairs hold the
    unquantized float reconstructions.
    """
    if not references:
        raise DataError("roundtrip_dataset needs at least one reference")
    _index_by_id(references, "references")

    def _one(ref):
        try:
            return adapter.roundtrip(ref), None
        except Exception as exc:
            return None, f"{type(exc).__name__}: {exc}"

    ordered = sorted(references, key=lambda im: im.source_id)
    results = _map_ordered(_one, ordered, workers)
    pairs, failures = [], {}
    for ref, (recon, err) in zip(ordered, results):
        if err is not None:
            logger.warning("adapter %s failed on %s: %s", adapter.name, ref.source_id, err)
            failures[ref.source_id] = err
            continue
        pairs.append(ImagePair(ref, recon))
        if cache_dir is not None:
            save_image(recon, Path(cache_dir) / adapter.name / f"{ref.source_id}.png")
    return PairResult(pairs, failures=failures)


def write_pair_manifest(path: str | os.PathLike, pairs: Iterable[ImagePair],
                        ref_paths: Mapping[str, str], recon_paths: Mapping[str, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_id", "ref_path", "recon_path"])
        for pair in sorted(pairs, key=lambda p: p.source_id):
            sid = pair.source_id
            writer.writerow([sid, ref_paths.get(sid, ""), recon_paths.get(sid, "")])
    return path


def read_pair_manifest(path: str | os.PathLike, side: int = 256) -> PairResult:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    refs = [load_image(r["ref_path"], side, r["source_id"]) for r in rows]
    recs = [load_image(r["recon_path"], side, r["source_id"]) for r in rows]
    return make_pairs(refs, recs)


def _map_ordered(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
