"""Synthetic autoencoders, synthetic image sets and exact finite-world checks.

The finite-world part enumerates a discrete image space to compare the
alignment error of a latent-optimal generator with the expected
reconstruction drift.  Probabilities may be ``fractions.Fraction`` for exact
arithmetic; condition vectors are integer tuples compared under L1.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import AutoencoderAdapter, ImageTensor, LatentCode


# -- synthetic autoencoders ----------------------------------------------------

@dataclass(frozen=True)
class SyntheticAE(AutoencoderAdapter):
    kind: str = "identity"
    params: dict = field(default_factory=dict)

    def stamp(self) -> dict:
        return {"kind": self.kind, **self.params}


def _as_latent(image: ImageTensor) -> LatentCode:
    return LatentCode(np.array(image.data), 1)


def identity_ae(name: str = "identity") -> SyntheticAE:
    return SyntheticAE(name, _as_latent, lambda z: z.data, "identity", {})


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur with reflected borders."""
    if sigma == 0:
        return np.array(data, dtype=np.float64)
    return ndimage.gaussian_filter(data, sigma=(0, sigma, sigma), mode="reflect")


def blur_ae(sigma: float, name: str | None = None) -> SyntheticAE:
    if sigma < 0:
        raise ValueError(f"negative blur sigma {sigma}")
    if sigma == 0:
        return identity_ae(name or "blur_0")
    return SyntheticAE(name or f"blur_{sigma:g}", _as_latent, lambda z: gaussian_blur(z.data, sigma),
                       "blur", {"sigma": float(sigma)})


def quantize_ae(levels: int, name: str | None = None) -> SyntheticAE:
    if levels < 2:
        raise ValueError("quantize needs at least 2 levels")
    step = levels - 1
    return SyntheticAE(name or f"quantize_{levels}", _as_latent,
                       lambda z: np.round(z.data * step) / step, "quantize", {"levels": levels})


def make_blur_family(sigmas: Sequence[float]) -> list[SyntheticAE]:
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise ValueError("blur sigmas must be nonnegative")
    if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("blur sigmas must be strictly increasing")
    return [blur_ae(s) for s in sigmas]


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform fixed-point-free permutation by rejection sampling."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_permutation_ae(dataset: Sequence[ImageTensor], seed: int = 0,
                        name: str = "permutation") -> SyntheticAE:
    """AE whose roundtrip sends dataset image ``i`` to image ``perm[i]``.

    The reconstruction set is the reference set reshuffled, so any
    distributional statistic of the two sets is identical.
    """
    if len(dataset) < 2:
        raise ValueError("permutation AE needs a dataset of at least 2 images")
    ordered = sorted(dataset, key=lambda im: im.source_id)
    index = {im.source_id: i for i, im in enumerate(ordered)}
    if len(index) != len(ordered):
        raise ValueError("duplicate source_id in dataset")
    perm = random_derangement(len(ordered), np.random.default_rng(seed))

    def encode(image: ImageTensor) -> LatentCode:
        if image.source_id not in index:
            raise KeyError(f"{image.source_id!r} is not part of the permutation dataset")
        return LatentCode(np.array(ordered[perm[index[image.source_id]]].data), 1)

    mapping = {ordered[i].source_id: ordered[perm[i]].source_id for i in range(len(ordered))}
    return SyntheticAE(name, encode, lambda z: z.data, "permutation",
                       {"seed": seed, "mapping": mapping})


# -- synthetic image sets ------------------------------------------------------

def _draw_shape(canvas, rng, side):
    yy, xx = np.mgrid[0:side, 0:side]
    color = rng.uniform(0.0, 1.0, size=3)
    if rng.random() < 0.5:
        y0, x0 = rng.integers(0, side - 8, size=2)
        h, w = rng.integers(6, side // 2, size=2)
        mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    else:
        cy, cx = rng.uniform(0, side, size=2)
        ry, rx = rng.uniform(3, side / 4, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    canvas[:, mask] = color[:, None]


def make_synthetic_images(n: int, side: int = 64, seed: int = 0, shapes: tuple[int, int] = (2, 5),
                          noise: float = 0.0, prefix: str = "syn") -> list[ImageTensor]:
    """Piecewise-constant images of random rectangles and ellipses."""
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n):
        canvas = np.empty((3, side, side))
        canvas[:] = rng.uniform(0.0, 1.0, size=3)[:, None, None]
        for _ in range(rng.integers(shapes[0], shapes[1] + 1)):
            _draw_shape(canvas, rng, side)
        if noise > 0:
            canvas = canvas + rng.normal(0.0, noise, size=canvas.shape)
        images.append(ImageTensor(np.clip(canvas, 0.0, 1.0), f"{prefix}_{i:04d}"))
    return images


def make_step_images(n: int, side: int = 64, seed: int = 0, blob_prob: float = 0.5,
                     prefix: str = "step") -> list[ImageTensor]:
    """Gray images with one or two straight steps and an optional blob."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side]
    images = []
    for i in range(n):
        lo, hi = sorted(rng.uniform(0.05, 0.95, size=2))
        if hi - lo < 0.3:
            lo, hi = max(0.0, lo - 0.2), min(1.0, hi + 0.2)
        img = np.full((side, side), lo)
        pos = rng.integers(side // 8, side - side // 8)
        if rng.random() < 0.5:
            img[:, pos:] = hi
        else:
            img[pos:, :] = hi
        if rng.random() < blob_prob:
            cy, cx = rng.uniform(side / 4, 3 * side / 4, size=2)
            r = rng.uniform(side / 10, side / 5)
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = rng.uniform(0.0, 1.0)
        images.append(ImageTensor(np.repeat(img[None], 3, axis=0), f"{prefix}_{i:04d}"))
    return images


# -- exact finite worlds ---------------------------------------------------------

def l1(a: Sequence, b: Sequence):
    return sum(abs(x - y) for x, y in zip(a, b, strict=True))


@dataclass
class DiscreteWorld:
    """A finite image space with data probabilities and AE lookup tables.

    ``probs[x]`` is the data probability of image ``x`` (images outside the
    data support carry 0 but may still be decoder outputs), ``conditions[x]``
    its integer condition vector, ``encoder[x]`` its latent index and
    ``decoder[z]`` the image a latent decodes to.
    """

    probs: list
    conditions: list[tuple[int, ...]]
    encoder: list[int]
    decoder: list[int]

    def __post_init__(self):
        n = len(self.probs)
        if not (len(self.conditions) == len(self.encoder) == n):
            raise ValueError("probs, conditions and encoder tables must have equal length")
        if any(p < 0 for p in self.probs):
            raise ValueError("negative probability")
        total = sum(self.probs)
        if self.exact:
            if total != 1:
                raise ValueError(f"probabilities sum to {total}, not 1")
        elif abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        if any(not 0 <= z < len(self.decoder) for z in self.encoder):
            raise ValueError("encoder output outside latent range")
        if any(not 0 <= x < n for x in self.decoder):
            raise ValueError("decoder output outside image range")
        self.conditions = [tuple(c) for c in self.conditions]

    @property
    def exact(self) -> bool:
        return all(isinstance(p, Rational) for p in self.probs)

    def reconstruct(self, x: int) -> int:
        return self.decoder[self.encoder[x]]

    def condition_marginal(self) -> dict:
        pc = defaultdict(int)
        for x, p in enumerate(self.probs):
            if p:
                pc[self.conditions[x]] += p
        return dict(pc)

    def joint(self) -> dict:
        """p(c, z) accumulated over images with that condition and latent."""
        pcz = defaultdict(int)
        for x, p in enumerate(self.probs):
            if p:
                pcz[(self.conditions[x], self.encoder[x])] += p
        return dict(pcz)

    def latent_given_condition(self) -> dict:
        pc = self.condition_marginal()
        out = defaultdict(dict)
        for (c, z), p in self.joint().items():
            out[c][z] = p / pc[c]
        return dict(out)


def alignment_error_exact(world: DiscreteWorld):
    """Alignment error of a generator sampling z ~ p_E(z | c) and decoding.

    Enumerates conditions, then latents under the encoder-induced conditional.
    """
    total = 0
    pz_c = world.latent_given_condition()
    for c, pc in world.condition_marginal().items():
        inner = 0
        for z, pz in pz_c[c].items():
            inner += pz * l1(world.conditions[world.decoder[z]], c)
        total += pc * inner
    return total


def expected_drift_exact(world: DiscreteWorld):
    """Data expectation of the per-image condition drift under the AE."""
    return sum(p * l1(world.conditions[x], world.conditions[world.reconstruct(x)])
               for x, p in enumerate(world.probs) if p)


def random_world(rng: np.random.Generator, exact: bool = True, max_images: int = 12,
                 max_latents: int = 12) -> DiscreteWorld:
    """Random small world, often with many-to-one encoders and shared conditions."""
    n_data = int(rng.integers(2, max_images + 1))
    n_extra = int(rng.integers(0, 4))
    n_lat = int(rng.integers(1, max_latents + 1))
    dim = int(rng.integers(1, 4))
    pool = [tuple(int(v) for v in rng.integers(-3, 4, size=dim))
            for _ in range(int(rng.integers(1, n_data + n_extra + 1)))]
    conditions = [pool[int(rng.integers(len(pool)))] for _ in range(n_data + n_extra)]
    encoder = [int(rng.integers(n_lat)) for _ in range(n_data + n_extra)]
    decoder = [int(rng.integers(n_data + n_extra)) for _ in range(n_lat)]
    if exact:
        weights = rng.integers(0, 10, size=n_data)
        if weights.sum() == 0:
            weights[0] = 1
        total = int(weights.sum())
        probs = [Fraction(int(w), total) for w in weights] + [Fraction(0)] * n_extra
    else:
        w = rng.dirichlet(np.ones(n_data))
        w = w / math.fsum(w)
        probs = [float(v) for v in w] + [0.0] * n_extra
        probs[0] += 1.0 - math.fsum(probs)
    return DiscreteWorld(probs, conditions, encoder, decoder)


def theorem_gap_trials(trials: int = 1000, seed: int = 0) -> tuple[float, int]:
    """Max |alignment - expected drift| over random worlds (half exact, half float).

    Returns ``(max_abs_gap, n_exact_mismatches)``; the latter counts rational
    worlds where the two quantities are not identical.
    """
    seeds = np.random.SeedSequence(seed).spawn(trials)
    max_gap, exact_mismatch = 0.0, 0
    for i, ss in enumerate(seeds):
        world = random_world(np.random.default_rng(ss), exact=(i % 2 == 0))
        a, d = alignment_error_exact(world), expected_drift_exact(world)
        if world.exact and a != d:
            exact_mismatch += 1
        max_gap = max(max_gap, abs(float(a) - float(d)))
    return max_gap, exact_mismatch


# -- marginal vs coupling --------------------------------------------------------

def marginal_vs_coupling(n: int, seed: int = 0, side: int = 64) -> dict:
    """Compare a permutation AE with the identity on ``n`` synthetic images.

    Both AEs reproduce the reference set exactly as a multiset, so their
    Frechet distances vanish; only the permutation moves conditions.
    """
    from .core import roundtrip_dataset
    from .metrics import PixelPCA, compare_conditions, drift_record, feature_stats, frechet_distance
    from .projectors import make_canny

    images = make_synthetic_images(n, side=side, seed=seed)
    extractor = PixelPCA(n_components=min(16, n - 1)).fit(images)
    projector = make_canny()
    ref_stats = feature_stats(images, extractor)
    out = {"n": n, "seed": seed}
    for ae in (identity_ae(), make_permutation_ae(images, seed)):
        pairs = roundtrip_dataset(ae, images).pairs
        rec_stats = feature_stats([p.reconstruction for p in pairs], extractor)
        key = "identity" if ae.kind == "identity" else "permutation"
        out[f"{key}_frechet"] = frechet_distance(ref_stats, rec_stats)
        out[f"{key}_drift"] = drift_record(pairs, projector).mean
    maps = [projector(im) for im in images]
    out["min_pairwise"] = min(compare_conditions(maps[i], maps[j], projector.comparison)
                              for i in range(n) for j in range(i + 1, n))
    out["frechet"], out["mean_drift"] = out["permutation_frechet"], out["permutation_drift"]
    return out


def simulate(trials: int = 1000, seed: int = 0, sizes: Sequence[int] = (8, 32, 128)) -> dict:
    """Finite-world equality check plus marginal-vs-coupling cases, as a JSON-ready dict."""
    max_gap, mismatches = theorem_gap_trials(trials, seed)
    return {
        "trials": trials,
        "seed": seed,
        "max_abs_gap": max_gap,
        "exact_mismatches": mismatches,
        "prop1_cases": [marginal_vs_coupling(n, seed) for n in sizes],
    }
