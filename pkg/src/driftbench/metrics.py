"""Pairwise and distributional metrics over image pairs.

Distances follow the usual arrows: PSNR/SSIM/embedding similarities are
higher-better, everything else lower-better (see ``METRIC_DIRECTIONS``).
A metric that cannot be computed is *absent* with a reason, never zero.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .core import ImagePair, ImageTensor
from .projectors import COSINE, L1_MEAN, MISMATCH, ConditionMap, ExtractorError, \
    Projector, face_extract

logger = logging.getLogger(__name__)

MAX_VALUE = 1.0

HIGHER, LOWER = "higher_better", "lower_better"

# Column order mirrors the published result tables.
REPORTED_METRICS = {"gFID": LOWER, "IS": HIGHER, "Prec": HIGHER, "Rec": HIGHER}
COMPUTED_METRICS = {
    "rFID": LOWER, "PSNR": HIGHER, "SSIM": HIGHER, "LPIPS": LOWER,
    "Canny": LOWER, "Depth": LOWER, "Seg": LOWER, "Spatial": LOWER,
    "Identity": HIGHER, "Face@R": HIGHER, "CLIP": HIGHER, "DINOv2": HIGHER,
}
METRIC_DIRECTIONS = {**REPORTED_METRICS, **COMPUTED_METRICS}


class MetricUnavailable(Exception):
    """The metric cannot be computed (missing backend, no faces, ...)."""


def _check_shapes(pair: ImagePair):
    if pair.reference.shape != pair.reconstruction.shape:
        raise ValueError(f"shape mismatch {pair.reference.shape} vs {pair.reconstruction.shape}")


# -- instance-level fidelity -------------------------------------------------

def psnr(pair: ImagePair) -> float:
    """PSNR in dB with MAX = 1.0 (identical to the 0-255 convention)."""
    _check_shapes(pair)
    mse = float(np.mean((pair.reference.data - pair.reconstruction.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(MAX_VALUE ** 2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    pad = len(g) // 2
    out = ndimage.correlate1d(x, g, axis=-1, mode="constant")
    out = ndimage.correlate1d(out, g, axis=-2, mode="constant")
    return out[..., pad:x.shape[-2] - pad, pad:x.shape[-1] - pad]


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
             K1: float = 0.01, K2: float = 0.03) -> np.ndarray:
    """Local SSIM over the valid region, per channel (input (C, H, W))."""
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image side smaller than SSIM window {window}")
    c1, c2 = (K1 * MAX_VALUE) ** 2, (K2 * MAX_VALUE) ** 2
    g = _gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pair: ImagePair, window: int = 11, sigma: float = 1.5, K1: float = 0.01,
         K2: float = 0.03) -> float:
    _check_shapes(pair)
    return float(ssim_map(pair.reference.data, pair.reconstruction.data, window, sigma, K1, K2).mean())


# -- perceptual distance -----------------------------------------------------

class FeatureBackend(Protocol):
    name: str

    def layers(self, image: ImageTensor) -> list[np.ndarray]: ...

    def channel_weights(self) -> list[np.ndarray]: ...


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    patches = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (Cin, H, W, 3, 3)
    return np.einsum("chwij,ocij->ohw", patches, w, optimize=True) + b[:, None, None]


class ToyConvBackend:
    """Fixed-seed two-layer ReLU conv net with uniform channel weights."""

    def __init__(self, seed: int = 0, widths: Sequence[int] = (8, 16)):
        rng = np.random.default_rng(seed)
        self.name = f"toyconv-{seed}-{'x'.join(map(str, widths))}"
        self.params = []
        cin = 3
        for cout in widths:
            w = rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(cin * 9)
            b = rng.standard_normal(cout) * 0.1
            self.params.append((w, b))
            cin = cout

    def layers(self, image: ImageTensor) -> list[np.ndarray]:
        x = image.data * 2.0 - 1.0
        feats = []
        for i, (w, b) in enumerate(self.params):
            if i:
                c, h, wd = x.shape
                x = x[:, :h - h % 2, :wd - wd % 2].reshape(c, h // 2, 2, wd // 2, 2).mean(axis=(2, 4))
            x = np.maximum(_conv3x3(x, w, b), 0.0)
            feats.append(x)
        return feats

    def channel_weights(self) -> list[np.ndarray]:
        return [np.ones(w.shape[0]) for w, _ in self.params]


def _unit_normalize(f: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    return f / (np.sqrt(np.sum(f * f, axis=0, keepdims=True)) + eps)


def perceptual_distance(pair: ImagePair, backend: FeatureBackend | None) -> float:
    """LPIPS-style aggregation over a feature backend's layers."""
    if backend is None:
        raise MetricUnavailable("no perceptual backend")
    _check_shapes(pair)
    total = 0.0
    fa, fb = backend.layers(pair.reference), backend.layers(pair.reconstruction)
    for a, b, w in zip(fa, fb, backend.channel_weights()):
        diff = (_unit_normalize(a) - _unit_normalize(b)) ** 2
        total += float(np.einsum("c,chw->hw", w, diff).mean())
    return total


# -- feature statistics & Frechet distance -------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.size}")
        if self.n < 2:
            raise ValueError("FeatureStats needs n >= 2")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-8):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        """Two-pass sample mean and unbiased covariance."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        n = feats.shape[0]
        if n < 2:
            raise ValueError("need at least 2 feature vectors")
        mu = feats.mean(axis=0)
        centered = feats - mu
        return cls(mu, centered.T @ centered / (n - 1), n)

    @classmethod
    def gaussian(cls, mean, cov, n: int = 2) -> "FeatureStats":
        return cls(np.asarray(mean, dtype=float), np.asarray(cov, dtype=float), n)

    def save(self, path) -> None:
        np.savez(path, mean=self.mean, cov=self.cov, n=self.n)

    @classmethod
    def load(cls, path) -> "FeatureStats":
        with np.load(path) as z:
            return cls(z["mean"], z["cov"], int(z["n"]))


class StreamingStats:
    """Mergeable mean/covariance accumulator (pairwise update)."""

    def __init__(self, dim: int | None = None):
        self.n = 0
        self.mean = None if dim is None else np.zeros(dim)
        self.m2 = None if dim is None else np.zeros((dim, dim))

    def update(self, batch: np.ndarray) -> "StreamingStats":
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if batch.shape[0] == 0:
            return self
        other = StreamingStats()
        other.n = batch.shape[0]
        other.mean = batch.mean(axis=0)
        c = batch - other.mean
        other.m2 = c.T @ c
        return self.merge(other)

    def merge(self, other: "StreamingStats") -> "StreamingStats":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean.copy(), other.m2.copy()
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.n / n)
        self.m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.n * other.n / n)
        self.n = n
        return self

    def finalize(self) -> FeatureStats:
        if self.n < 2:
            raise ValueError("need at least 2 samples")
        cov = self.m2 / (self.n - 1)
        return FeatureStats(self.mean.copy(), (cov + cov.T) / 2, self.n)


def feature_stats(images: Sequence[ImageTensor], extractor: Callable[[Sequence[ImageTensor]], np.ndarray],
                  batch_size: int = 64) -> FeatureStats:
    """Mean/covariance of ``extractor`` features, accumulated batch by batch."""
    if len(images) < 2:
        raise ValueError("feature_stats needs at least 2 images")
    acc = StreamingStats()
    for start in range(0, len(images), batch_size):
        acc.update(extractor(images[start:start + batch_size]))
    return acc.finalize()


def _psd_eig(mat: np.ndarray, what: str, rel_tol: float, abs_tol: float = 0.0):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    scale = max(float(w.max()), 0.0)
    if w.min() < -(rel_tol * scale + abs_tol):
        raise ValueError(f"{what} is not positive semidefinite: min eigenvalue {w.min():.3e}, "
                         f"max {w.max():.3e}")
    return np.clip(w, 0.0, None), v


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    ``tr((Sa Sb)^1/2)`` is evaluated as the sum of square roots of the
    eigenvalues of ``Sa^1/2 Sb Sa^1/2``, which is symmetric PSD.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    wa, va = _psd_eig(a.cov, "first covariance", 1e-8, 1e-8)
    _psd_eig(b.cov, "second covariance", 1e-8, 1e-8)
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    sqrt_a = (va * np.sqrt(wa)) @ va.T
    m = sqrt_a @ b.cov @ sqrt_a
    wm, _ = _psd_eig(m, "Sa^1/2 Sb Sa^1/2", 1e-10)
    # eigenvalues at rounding level are zeros in disguise; their square roots
    # (~1e-8 relative each) would otherwise add up over rank-deficient dims
    wm[wm <= 100 * wm.size * np.finfo(float).eps * wm.max(initial=0.0)] = 0.0
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(wm).sum())
    if d < 0.0:
        if d < -1e-6:
            raise ValueError(f"Frechet distance materially negative ({d:.3e})")
        d = 0.0
    return d


class PixelPCA:
    """Average-pooled pixels projected on a PCA basis fitted to reference images.

    A weight-free stand-in for an Inception feature extractor.
    """

    def __init__(self, n_components: int = 16, pool_side: int = 8):
        self.n_components, self.pool_side = n_components, pool_side
        self.mean_ = self.components_ = None

    @property
    def name(self) -> str:
        return f"pixelpca-{self.pool_side}-{self.n_components}"

    def _raw(self, images: Sequence[ImageTensor]) -> np.ndarray:
        s = self.pool_side
        rows = []
        for im in images:
            c, h, w = im.shape
            if h % s or w % s:
                raise ValueError(f"image side {h} not divisible by pool side {s}")
            rows.append(im.data.reshape(c, s, h // s, s, w // s).mean(axis=(2, 4)).ravel())
        return np.stack(rows)

    def fit(self, images: Sequence[ImageTensor]) -> "PixelPCA":
        x = self._raw(images)
        self.mean_ = x.mean(axis=0)
        _, _, vt = np.linalg.svd(x - self.mean_, full_matrices=False)
        k = min(self.n_components, vt.shape[0])
        comps = vt[:k]
        # fix the sign of each component for reproducibility
        signs = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
        self.components_ = comps * signs[:, None]
        return self

    def __call__(self, images: Sequence[ImageTensor]) -> np.ndarray:
        if self.components_ is None:
            raise RuntimeError("PixelPCA must be fitted first")
        return (self._raw(images) - self.mean_) @ self.components_.T


# -- condition drift ---------------------------------------------------------

def compare_conditions(a: ConditionMap, b: ConditionMap, comparison: str) -> float:
    if a.data.shape != b.data.shape:
        raise ValueError(f"condition shapes differ: {a.data.shape} vs {b.data.shape}")
    if comparison == L1_MEAN:
        return float(np.mean(np.abs(a.data - b.data)))
    if comparison == MISMATCH:
        return float(np.mean(a.data != b.data))
    if comparison == COSINE:
        na, nb = np.linalg.norm(a.data), np.linalg.norm(b.data)
        if na == 0 or nb == 0:
            raise ValueError("cosine similarity of a zero vector")
        return float(np.clip(a.data @ b.data / (na * nb), -1.0, 1.0))
    raise ValueError(f"unknown comparison {comparison!r}")


def condition_drift(pair: ImagePair, projector: Projector) -> float:
    """Distance between conditions of a pair (cosine *similarity* for embeddings)."""
    return compare_conditions(projector(pair.reference), projector(pair.reconstruction),
                              projector.comparison)


@dataclass
class DriftRecord:
    projector_name: str
    per_pair: list[tuple[str, float]]
    excluded: int = 0
    comparison: str = L1_MEAN

    @property
    def mean(self) -> float:
        if not self.per_pair:
            return math.nan
        return math.fsum(v for _, v in self.per_pair) / len(self.per_pair)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.per_pair])


def drift_record(pairs: Iterable[ImagePair], projector: Projector, workers: int = 1) -> DriftRecord:
    """Per-pair drift; pairs whose extractor fails are excluded and counted.

    Pass ``workers=1`` for projectors backed by non-reentrant extractors.
    """
    pairs = sorted(pairs, key=lambda p: p.source_id)

    def _one(pair):
        try:
            return condition_drift(pair, projector)
        except ExtractorError as exc:
            logger.warning("%s excluded from %s: %s", pair.source_id, projector.name, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            vals = list(pool.map(_one, pairs))
    else:
        vals = [_one(p) for p in pairs]
    kept = [(p.source_id, v) for p, v in zip(pairs, vals) if v is not None]
    return DriftRecord(projector.name, kept, len(pairs) - len(kept), projector.comparison)


def spatial_aggregate(canny: DriftRecord | None, depth: DriftRecord | None,
                      seg: DriftRecord | None) -> float | None:
    """Mean of the three per-projector drift means, or None if any is missing."""
    records = (canny, depth, seg)
    if any(r is None or not r.per_pair for r in records):
        return None
    return (canny.mean + depth.mean + seg.mean) / 3.0


@dataclass
class IdentityResult:
    mean_cos: float | None
    face_recall: float | None
    reason: str | None = None
    n_reference_faces: int = 0
    n_both: int = 0
    adapter_errors: int = 0


def identity_similarity(pairs: Sequence[ImagePair], face_adapter) -> IdentityResult:
    """Identity cosine over pairs with faces on both sides, plus face recall.

    Face recall is the fraction of pairs with a reference detection whose
    reconstruction also yields a detection.
    """
    sims, ref_hits, both, errors = [], 0, 0, 0
    for pair in pairs:
        ref = face_extract(pair.reference, face_adapter)
        rec = face_extract(pair.reconstruction, face_adapter)
        errors += (ref.error is not None) + (rec.error is not None)
        if not ref.detected:
            continue
        ref_hits += 1
        if rec.detected:
            both += 1
            sims.append(float(np.clip(ref.embedding @ rec.embedding, -1.0, 1.0)))
    if ref_hits == 0:
        return IdentityResult(None, None, "no faces in reference set", 0, 0, errors)
    mean_cos = math.fsum(sims) / len(sims) if sims else None
    return IdentityResult(mean_cos, both / ref_hits, None if sims else "no reconstructed faces",
                          ref_hits, both, errors)


@dataclass
class MetricVector:
    values: dict[str, float] = field(default_factory=dict)
    absent: dict[str, str] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def set(self, name: str, value: float | None, reason: str = "not computed") -> None:
        if name not in METRIC_DIRECTIONS:
            raise KeyError(f"unregistered metric {name!r}")
        if value is None or (isinstance(value, float) and math.isnan(value)):
            self.values.pop(name, None)
            self.absent[name] = reason
        else:
            self.absent.pop(name, None)
            self.values[name] = float(value)

    def get(self, name: str) -> float | None:
        return self.values.get(name)


def mean_metric(pairs: Sequence[ImagePair], fn: Callable[[ImagePair], float]) -> float:
    """Mean over pairs; any +inf (identical pair) makes the mean +inf."""
    vals = [fn(p) for p in pairs]
    if not vals:
        return math.nan
    if any(math.isinf(v) for v in vals):
        return math.inf
    return math.fsum(vals) / len(vals)
