"""Condition projectors: images -> condition maps or embedding vectors.

Native projectors (``canny``, ``block_average``, ``gradient_magnitude``) are
pure numpy/scipy.  Model-backed extractors (depth, segmentation, faces,
global embeddings) are reached through small adapter objects; the
``SubprocessExtractor`` speaks a line-oriented pipe protocol so heavyweight
models can live in a separate environment.
"""

from __future__ import annotations

import io
import json
import logging
import subprocess
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import ndimage

from .core import ImageTensor

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])

SPATIAL, EMBEDDING, FACE = "spatial_map", "embedding", "face"
L1_MEAN, COSINE, MISMATCH = "l1_mean", "cosine", "label_mismatch"

CANNY_DEFAULTS = {"blur_sigma": 1.0, "low": 0.1, "high": 0.2}


class ExtractorError(Exception):
    """An external extractor failed, timed out or returned malformed output."""


@dataclass(frozen=True, eq=False)
class ConditionMap:
    data: np.ndarray
    projector_name: str
    kind: str = SPATIAL

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if self.kind == SPATIAL:
            if data.ndim != 3 or data.shape[0] != 1:
                raise ValueError(f"spatial map must be (1, H, W), got {data.shape}")
            if data.size and (data.min() < 0.0 or data.max() > 1.0):
                raise ValueError(f"{self.projector_name}: spatial map outside [0, 1]")
        elif self.kind == EMBEDDING:
            if data.ndim != 1:
                raise ValueError(f"embedding must be a vector, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class FaceResult:
    detected: bool
    embedding: np.ndarray | None = None
    bbox_area: float | None = None
    error: str | None = None

    def __post_init__(self):
        if not self.detected and self.embedding is not None:
            raise ValueError("embedding present without a detection")
        if self.embedding is not None:
            norm = float(np.linalg.norm(self.embedding))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"face embedding not unit norm ({norm})")


@dataclass(frozen=True)
class Projector:
    name: str
    kind: str
    apply: Callable[[ImageTensor], Any]
    comparison: str = L1_MEAN
    lipschitz_bound: float | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, image: ImageTensor):
        return self.apply(image)

    def stamp(self) -> dict:
        return {"name": self.name, "kind": self.kind, "comparison": self.comparison, **self.params}


def to_gray(image: ImageTensor | np.ndarray) -> np.ndarray:
    data = image.data if isinstance(image, ImageTensor) else np.asarray(image)
    return np.tensordot(LUMA, data, axes=(0, 0))


def _check_finite(data):
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite pixel values")


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0.0:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


# -- Canny -------------------------------------------------------------------

def _sobel_gradients(gray, sigma):
    # truncate=2 keeps a 5x5 kernel at sigma=1
    blurred = ndimage.gaussian_filter(gray, sigma, truncate=2.0, mode="nearest") if sigma > 0 else gray
    gx = ndimage.sobel(blurred, axis=1, mode="nearest")
    gy = ndimage.sobel(blurred, axis=0, mode="nearest")
    return gx, gy


def non_maximum_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin ``mag`` along the gradient direction (4 quantized directions).

    A pixel survives if it is strictly greater than its neighbour on the
    negative side and at least equal to the one on the positive side, so a
    symmetric plateau of width two keeps exactly one pixel.  The one-pixel
    image frame is always suppressed.
    """
    h, w = mag.shape
    out = np.zeros_like(mag)
    if h < 3 or w < 3:
        return out
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    # (di, dj) of the positive-side neighbour for sectors 0, 45, 90, 135 degrees
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]
    center = mag[1:-1, 1:-1]
    keep = np.zeros_like(center, dtype=bool)
    for s, (di, dj) in enumerate(offsets):
        pos = mag[1 + di:h - 1 + di, 1 + dj:w - 1 + dj]
        neg = mag[1 - di:h - 1 - di, 1 - dj:w - 1 - dj]
        keep |= (sector[1:-1, 1:-1] == s) & (center > neg) & (center >= pos)
    out[1:-1, 1:-1] = np.where(keep, center, 0.0)
    return out


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = nms >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(nms.shape, dtype=bool)
    strong_labels = np.unique(labels[(nms >= high) & weak])
    strong_labels = strong_labels[strong_labels > 0]
    return np.isin(labels, strong_labels)


def canny_edges(gray: np.ndarray, blur_sigma: float = 1.0, low: float = 0.1,
                high: float = 0.2) -> np.ndarray:
    """Binary edge map of a 2-D grayscale array.

    Thresholds apply to the gradient magnitude divided by its per-image
    maximum.
    """
    if not 0.0 < low < high <= 1.0:
        raise ValueError(f"need 0 < low < high <= 1, got low={low}, high={high}")
    gray = np.asarray(gray, dtype=np.float64)
    _check_finite(gray)
    gx, gy = _sobel_gradients(gray, blur_sigma)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(gray.shape, dtype=bool)
    # rounding makes the result independent of float noise from intensity offsets
    mag = np.round(mag / peak, 10)
    gx, gy = np.round(gx / peak, 10), np.round(gy / peak, 10)
    nms = non_maximum_suppression(mag, gx, gy)
    return hysteresis(nms, low, high)


def canny(image: ImageTensor, blur_sigma: float = 1.0, low: float = 0.1, high: float = 0.2,
          name: str = "canny") -> ConditionMap:
    _check_finite(image.data)
    edges = canny_edges(to_gray(image), blur_sigma, low, high)
    return ConditionMap(edges[None].astype(np.float64), name)


# -- Lipschitz and gradient projectors ---------------------------------------

def block_average(image: ImageTensor, block: int, name: str = "block_average") -> ConditionMap:
    """Grayscale block means; 1-Lipschitz under mean-absolute distances.

    Grayscale here is the plain channel mean: luma weights sum to 1 but the
    largest (0.587) exceeds 1/3, so a green-only change would break the bound.
    """
    data = image.data if isinstance(image, ImageTensor) else np.asarray(image, dtype=np.float64)
    gray = data.mean(axis=0)
    h, w = gray.shape
    if block < 1 or h % block or w % block:
        raise ValueError(f"block {block} does not divide image size {h}x{w}")
    pooled = gray.reshape(h // block, block, w // block, block).mean(axis=(1, 3))
    return ConditionMap(np.clip(pooled, 0.0, 1.0)[None], name)


def gradient_magnitude(image: ImageTensor, sigma: float = 1.0, name: str = "gradient") -> ConditionMap:
    """Blurred Sobel magnitude, min-max normalized per image.

    Offline stand-in for a relative-depth extractor.
    """
    gx, gy = _sobel_gradients(to_gray(image), sigma)
    return ConditionMap(minmax_normalize(np.hypot(gx, gy))[None], name)


# -- External extractors -----------------------------------------------------

@dataclass
class CallableExtractor:
    """Wrap an in-process function ``fn(image_data_chw) -> array``.

    ``kind`` is one of ``map``, ``labels``, ``vector`` or ``faces``.  Face
    extractors return an (n, 4 + D) array: bbox ``x0, y0, x1, y1`` then the
    identity embedding.
    """

    name: str
    kind: str
    fn: Callable[[np.ndarray], np.ndarray]
    version: str = "0"
    reentrant: bool = True

    def __call__(self, image: ImageTensor) -> np.ndarray:
        return np.asarray(self.fn(image.data), dtype=np.float64)


@dataclass
class SubprocessExtractor:
    """Run ``command`` once per image over stdin/stdout.

    The child receives an RGB PNG on stdin and must write a one-line JSON
    header ``{"kind": ..., "dims": [...]}`` followed by
    ``prod(dims)`` little-endian float32 values.
    """

    name: str
    kind: str
    command: Sequence[str]
    timeout: float = 60.0
    version: str = "0"
    reentrant: bool = False

    def __call__(self, image: ImageTensor) -> np.ndarray:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(image.to_uint8(), mode="RGB").save(buf, format="PNG")
        try:
            proc = subprocess.run(list(self.command), input=buf.getvalue(), capture_output=True,
                                  timeout=self.timeout, check=False)
        except subprocess.TimeoutExpired as exc:
            raise ExtractorError(f"{self.name}: timeout after {self.timeout}s") from exc
        except OSError as exc:
            raise ExtractorError(f"{self.name}: cannot start {self.command!r}: {exc}") from exc
        if proc.returncode != 0:
            raise ExtractorError(f"{self.name}: exit {proc.returncode}: "
                                 f"{proc.stderr.decode(errors='replace')[-200:]}")
        return parse_extractor_output(proc.stdout, self.kind, self.name)


def parse_extractor_output(payload: bytes, expected_kind: str, name: str = "extractor") -> np.ndarray:
    head, sep, body = payload.partition(b"\n")
    if not sep:
        raise ExtractorError(f"{name}: missing header line")
    try:
        header = json.loads(head)
        kind, dims = header["kind"], [int(d) for d in header["dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ExtractorError(f"{name}: malformed header {head[:80]!r}") from exc
    if kind != expected_kind:
        raise ExtractorError(f"{name}: declared kind {kind!r}, expected {expected_kind!r}")
    count = int(np.prod(dims)) if dims else 0
    if len(body) != 4 * count:
        raise ExtractorError(f"{name}: expected {4 * count} payload bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise ExtractorError(f"{name}: non-finite values in output")
    return arr


def encode_extractor_output(arr: np.ndarray, kind: str) -> bytes:
    """Serialize ``arr`` in the pipe protocol (used by extractor plugins)."""
    arr = np.asarray(arr, dtype="<f4")
    header = json.dumps({"kind": kind, "dims": list(arr.shape)}).encode()
    return header + b"\n" + arr.tobytes()


def _resize_map(arr: np.ndarray, side: int) -> np.ndarray:
    if arr.shape == (side, side):
        return arr
    zoom = (side / arr.shape[0], side / arr.shape[1])
    return ndimage.zoom(arr, zoom, order=1, mode="nearest")


def apply_adapter_projector(image: ImageTensor, adapter, resolution: int | None = None,
                            num_classes: int | None = None) -> ConditionMap:
    """Run a spatial extractor and normalize its output to [0, 1].

    ``map`` outputs (depth-like) are min-max normalized per image.
    ``labels`` outputs are stored as ``label / (num_classes - 1)`` and
    compared by label mismatch.
    """
    try:
        raw = adapter(image)
    except ExtractorError:
        raise
    except Exception as exc:
        raise ExtractorError(f"{adapter.name}: {type(exc).__name__}: {exc}") from exc
    raw = np.squeeze(np.asarray(raw, dtype=np.float64))
    if raw.ndim != 2:
        raise ExtractorError(f"{adapter.name}: expected a 2-D map, got shape {raw.shape}")
    if adapter.kind == "labels":
        if num_classes is None or num_classes < 2:
            raise ValueError("label extractors need num_classes >= 2")
        labels = np.rint(raw)
        if labels.min() < 0 or labels.max() >= num_classes:
            raise ExtractorError(f"{adapter.name}: label outside [0, {num_classes})")
        if resolution is not None and labels.shape != (resolution, resolution):
            labels = np.rint(ndimage.zoom(labels, (resolution / labels.shape[0],
                                                   resolution / labels.shape[1]), order=0))
        data = labels / (num_classes - 1)
    elif adapter.kind == "map":
        data = minmax_normalize(raw)
        if resolution is not None:
            data = np.clip(_resize_map(data, resolution), 0.0, 1.0)
    else:
        raise ExtractorError(f"{adapter.name}: kind {adapter.kind!r} is not spatial")
    return ConditionMap(data[None], adapter.name)


def face_extract(image: ImageTensor, adapter) -> FaceResult:
    """Embedding of the largest detected face (by bbox area)."""
    try:
        dets = np.asarray(adapter(image), dtype=np.float64)
    except Exception as exc:
        msg = f"{type(exc).__name__}: {exc}"
        logger.error("face adapter %s failed on %s: %s", adapter.name, image.source_id, msg)
        return FaceResult(False, error=msg)
    if dets.size == 0:
        return FaceResult(False)
    dets = np.atleast_2d(dets)
    if dets.shape[1] < 5:
        logger.error("face adapter %s: malformed detections %s", adapter.name, dets.shape)
        return FaceResult(False, error="malformed detections")
    areas = np.clip(dets[:, 2] - dets[:, 0], 0, None) * np.clip(dets[:, 3] - dets[:, 1], 0, None)
    best = int(np.argmax(areas))
    emb = dets[best, 4:]
    norm = np.linalg.norm(emb)
    if norm == 0.0:
        logger.error("face adapter %s: zero embedding on %s", adapter.name, image.source_id)
        return FaceResult(False, error="zero embedding")
    return FaceResult(True, emb / norm, float(areas[best]))


def global_embedding(image: ImageTensor, adapter) -> ConditionMap:
    try:
        vec = np.asarray(adapter(image), dtype=np.float64).ravel()
    except ExtractorError:
        raise
    except Exception as exc:
        raise ExtractorError(f"{adapter.name}: {type(exc).__name__}: {exc}") from exc
    if vec.size == 0 or not np.any(vec):
        raise ExtractorError(f"{adapter.name}: zero embedding for {image.source_id}")
    return ConditionMap(vec, adapter.name, kind=EMBEDDING)


class ToyEmbedding:
    """Deterministic random linear map of 16x16 average-pooled pixels."""

    def __init__(self, dim: int = 64, seed: int = 0, name: str = "toy_embedding"):
        self.name, self.kind, self.dim, self.seed = name, "vector", dim, seed
        self.version = f"toy-{dim}-{seed}-{name}"
        self.reentrant = True
        # the name is mixed in so two slots with the same seed differ
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        self.weights = rng.standard_normal((dim, 3 * 16 * 16)) / np.sqrt(3 * 16 * 16)

    def __call__(self, image: ImageTensor) -> np.ndarray:
        c, h, w = image.shape
        if h % 16 or w % 16:
            raise ValueError("toy embedding needs sides divisible by 16")
        pooled = image.data.reshape(c, 16, h // 16, 16, w // 16).mean(axis=(2, 4))
        return self.weights @ pooled.ravel()


# -- registry ----------------------------------------------------------------

def make_canny(blur_sigma=1.0, low=0.1, high=0.2, name="canny") -> Projector:
    params = {"blur_sigma": blur_sigma, "low": low, "high": high}
    return Projector(name, SPATIAL, lambda im: canny(im, name=name, **params), L1_MEAN, None, params)


def make_block_average(block=8, name="block_average") -> Projector:
    return Projector(name, SPATIAL, lambda im: block_average(im, block, name), L1_MEAN, 1.0,
                     {"block": block})


def make_gradient(sigma=1.0, name="gradient") -> Projector:
    return Projector(name, SPATIAL, lambda im: gradient_magnitude(im, sigma, name), L1_MEAN, None,
                     {"sigma": sigma, "normalization": "per-image min-max"})


def make_adapter_projector(adapter, name: str | None = None, resolution: int | None = None,
                           num_classes: int | None = None) -> Projector:
    name = name or adapter.name
    comparison = MISMATCH if adapter.kind == "labels" else L1_MEAN
    params = {"extractor": adapter.name, "version": getattr(adapter, "version", "0"),
              "normalization": "label/(K-1)" if adapter.kind == "labels" else "per-image min-max"}

    def _apply(im):
        cmap = apply_adapter_projector(im, adapter, resolution, num_classes)
        return ConditionMap(cmap.data, name)

    return Projector(name, SPATIAL, _apply, comparison, None, params)


def make_embedding_projector(adapter, name: str | None = None) -> Projector:
    name = name or adapter.name

    def _apply(im):
        return ConditionMap(global_embedding(im, adapter).data, name, EMBEDDING)

    return Projector(name, EMBEDDING, _apply, COSINE, None,
                     {"extractor": adapter.name, "version": getattr(adapter, "version", "0")})
