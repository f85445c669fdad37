from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftbench.analysis import spearman
from driftbench.core import ImagePair, roundtrip_dataset
from driftbench.metrics import (
    PixelPCA, drift_record, feature_stats, frechet_distance, mean_metric, perceptual_distance, psnr,
    ToyConvBackend,
)
from driftbench.projectors import make_block_average, make_canny, make_gradient
from driftbench.synthetic import (
    DiscreteWorld, alignment_error_exact, blur_ae, expected_drift_exact, identity_ae, l1,
    make_blur_family, make_permutation_ae, make_step_images, make_synthetic_images, marginal_vs_coupling,
    quantize_ae, random_derangement, random_world, simulate, theorem_gap_trials,
)

F = Fraction


def _alignment_oracle(world):
    """Double sum over data images: draw x, then x' sharing x's condition."""
    total = 0
    for x, px in enumerate(world.probs):
        if not px:
            continue
        c = world.conditions[x]
        same = [(y, py) for y, py in enumerate(world.probs) if py and world.conditions[y] == c]
        pc = sum(py for _, py in same)
        for y, py in same:
            total += px * (py / pc) * l1(world.conditions[world.reconstruct(y)], c)
    return total


def test_invertible_world_is_zero():
    w = DiscreteWorld([F(1, 2), F(1, 2)], [(0,), (3,)], [1, 0], [1, 0])
    assert alignment_error_exact(w) == 0 and expected_drift_exact(w) == 0


def test_two_image_world():
    # x0 -> x0; x1 (prob 1/4) -> x2, an off-support image at condition distance 2
    w = DiscreteWorld([F(3, 4), F(1, 4), F(0)], [(0,), (5,), (7,)], [0, 1, 0], [0, 2])
    assert alignment_error_exact(w) == F(1, 2)
    assert expected_drift_exact(w) == F(1, 2)


def test_uniform_four_image_world():
    # per-image drifts 0, 0, 1, 3
    conds = [(0,), (10,), (20,), (30,), (21,), (33,)]
    w = DiscreteWorld([F(1, 4)] * 4 + [F(0)] * 2, conds, [0, 1, 2, 3, 0, 0], [0, 1, 4, 5])
    assert expected_drift_exact(w) == 1
    assert alignment_error_exact(w) == 1


def test_many_to_one_encoder():
    # x0 and x1 share a latent and a condition; x2 shares the condition but not the latent
    w = DiscreteWorld([F(1, 3), F(1, 6), F(1, 2)], [(1, 1), (1, 1), (1, 1)], [0, 0, 1], [2, 1])
    w2 = DiscreteWorld([F(1, 3), F(1, 6), F(1, 2)], [(1, 1), (4, 0), (1, 1)], [0, 0, 1], [1, 1])
    for world in (w, w2):
        assert alignment_error_exact(world) == expected_drift_exact(world) == _alignment_oracle(world)
    # every image decodes to x1 at condition (4, 0): drifts 4, 0, 4
    assert expected_drift_exact(w2) == F(1, 3) * 4 + F(1, 2) * 4


def test_world_validation():
    with pytest.raises(ValueError):
        DiscreteWorld([F(1, 2), F(1, 3)], [(0,), (1,)], [0, 0], [0])
    with pytest.raises(ValueError):
        DiscreteWorld([0.5, 0.5], [(0,), (1,)], [0, 2], [0])
    with pytest.raises(ValueError):
        DiscreteWorld([0.5, 0.5], [(0,), (1,)], [0, 0], [5])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**63 - 1), st.booleans())
def test_theorem_equality_random_worlds(seed, exact):
    w = random_world(np.random.default_rng(seed), exact=exact)
    a, d, o = alignment_error_exact(w), expected_drift_exact(w), _alignment_oracle(w)
    if exact:
        assert a == d == o
    else:
        assert abs(a - d) <= 1e-12 and abs(a - o) <= 1e-12


def test_theorem_gap_trials_small():
    gap, mismatches = theorem_gap_trials(50, seed=3)
    assert gap <= 1e-12 and mismatches == 0


def test_derangements():
    rng = np.random.default_rng(0)
    assert random_derangement(2, rng).tolist() == [1, 0]
    a = random_derangement(5, np.random.default_rng(5))
    b = random_derangement(5, np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert sorted(a.tolist()) == list(range(5))
    assert all(a[i] != i for i in range(5))
    with pytest.raises(ValueError):
        random_derangement(1, rng)


def test_permutation_ae_preserves_stats_and_moves_conditions():
    images = make_synthetic_images(32, side=64, seed=0)
    ae = make_permutation_ae(images, seed=0)
    pairs = roundtrip_dataset(ae, images)
    mapping = ae.params["mapping"]
    assert all(mapping[k] != k for k in mapping)
    channel_means = lambda ims: np.stack([im.data.mean(axis=(1, 2)) for im in ims])  # noqa: E731
    for extractor in (PixelPCA(16).fit(images), channel_means):
        ref = feature_stats(images, extractor)
        rec = feature_stats([p.reconstruction for p in pairs], extractor)
        assert frechet_distance(ref, rec) <= 1e-6
    assert drift_record(pairs, make_canny()).mean > 0


@pytest.mark.parametrize("n", [8, 32, 128])
def test_marginal_vs_coupling_sizes(n):
    out = marginal_vs_coupling(n, seed=0)
    assert out["identity_drift"] == 0.0 and out["identity_frechet"] <= 1e-6
    assert out["frechet"] <= 1e-6
    assert out["mean_drift"] >= out["min_pairwise"] > 0


def test_blur_family():
    fam = make_blur_family([0])
    assert len(fam) == 1 and fam[0].kind == "identity"
    with pytest.raises(ValueError):
        make_blur_family([0, 2, 1])
    with pytest.raises(ValueError):
        make_blur_family([-1])


def test_blur_family_monotone():
    images = make_synthetic_images(16, side=64, seed=1)
    ps, ds = [], []
    for ae in make_blur_family([0, 1, 2, 4]):
        pairs = [ImagePair(im, ae.roundtrip(im)) for im in images]
        ps.append(mean_metric(pairs, psnr))
        ds.append(drift_record(pairs, make_canny()).mean)
    assert all(a > b for a, b in zip(ps, ps[1:]))
    assert all(a <= b for a, b in zip(ds, ds[1:]))
    assert spearman(ps, ds) == -1.0


def test_identity_is_global_zero(synthetic16):
    pairs = [ImagePair(im, identity_ae().roundtrip(im)) for im in synthetic16]
    assert mean_metric(pairs, psnr) == np.inf
    assert mean_metric(pairs, lambda p: perceptual_distance(p, ToyConvBackend())) == 0.0
    for proj in (make_canny(), make_gradient(), make_block_average(8)):
        assert drift_record(pairs, proj).mean == 0.0
    ext = PixelPCA(8).fit(synthetic16)
    s = feature_stats(synthetic16, ext)
    assert frechet_distance(s, feature_stats([p.reconstruction for p in pairs], ext)) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["blur1", "blur3", "q4", "q16", "perm"]))
def test_block_average_guardrail_for_synthetic_aes(seed, kind):
    images = make_step_images(6, side=32, seed=seed % 1000)
    ae = {"blur1": blur_ae(1.0), "blur3": blur_ae(3.0), "q4": quantize_ae(4), "q16": quantize_ae(16),
          "perm": make_permutation_ae(images, seed)}[kind]
    proj = make_block_average(4)
    for p in roundtrip_dataset(ae, images):
        mae = np.mean(np.abs(p.reference.data - p.reconstruction.data))
        assert drift_record([p], proj).mean <= mae + 1e-9


def test_simulate_report_shape():
    rep = simulate(trials=20, seed=1, sizes=(8,))
    assert set(rep) >= {"trials", "max_abs_gap", "prop1_cases"}
    case = rep["prop1_cases"][0]
    assert set(case) >= {"n", "frechet", "mean_drift"} and case["n"] == 8
