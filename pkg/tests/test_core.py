import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from driftbench.core import (
    AutoencoderAdapter, DataError, ImagePair, ImageTensor, LatentCode, ModelRecord, load_dataset,
    load_image, make_pairs, read_pair_manifest, roundtrip_dataset, save_image, write_pair_manifest,
)
from driftbench.metrics import psnr
from driftbench.synthetic import blur_ae, identity_ae

from conftest import constant_image, random_image


def test_image_tensor_validates_shape_and_range():
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((32, 32, 3)), "hwc")
    with pytest.raises(ValueError):
        ImageTensor(np.full((3, 8, 8), 1.5), "bright")
    with pytest.raises(ValueError):
        ImageTensor(np.full((3, 8, 8), np.nan), "nan")


def test_image_tensor_is_read_only():
    im = constant_image(0.5)
    with pytest.raises(ValueError):
        im.data[0, 0, 0] = 0.0


def test_jpeg_center_crop_geometry(tmp_path):
    # 512 wide, 384 tall; left and right 64-px strips are red, center is blue
    arr = np.zeros((384, 512, 3), dtype=np.uint8)
    arr[:, :64] = (255, 0, 0)
    arr[:, 448:] = (255, 0, 0)
    arr[:, 64:448] = (0, 0, 255)
    Image.fromarray(arr).save(tmp_path / "wide.jpg", quality=95)
    res = load_dataset(tmp_path, side=256)
    assert len(res) == 1
    im = res[0]
    assert im.shape == (3, 256, 256)
    assert im.source_id == "wide"
    # the red strips fall outside the central 384x384 crop
    # (JPEG chroma subsampling bleeds a couple of pixels at the old boundary)
    inner = im.data[:, :, 4:-4]
    assert inner[0].max() < 0.1
    assert inner[2].min() > 0.9


def test_white_png_loads_as_ones(tmp_path):
    Image.fromarray(np.full((256, 256, 3), 255, dtype=np.uint8)).save(tmp_path / "white.png")
    im = load_dataset(tmp_path, side=256)[0]
    assert np.all(im.data == 1.0)


def test_load_dataset_order_and_errors(tmp_path):
    for name in ["c", "a", "b"]:
        Image.fromarray(np.zeros((40, 40, 3), dtype=np.uint8)).save(tmp_path / f"{name}.png")
    (tmp_path / "broken.png").write_bytes(b"not a png")
    res = load_dataset(tmp_path, side=32, workers=2)
    assert [im.source_id for im in res] == ["a", "b", "c"]
    assert list(res.errors) == ["broken"]


def test_load_dataset_fatal_cases(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path, side=32)
    sub = tmp_path / "sub"
    sub.mkdir()
    Image.fromarray(np.zeros((40, 40, 3), dtype=np.uint8)).save(tmp_path / "x.png")
    Image.fromarray(np.zeros((40, 40, 3), dtype=np.uint8)).save(sub / "x.png")
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(tmp_path, side=32)


def test_preprocessing_idempotent(tmp_path, rng):
    im = random_image(rng, side=48, sid="r")
    save_image(im, tmp_path / "r.png")
    once = load_image(tmp_path / "r.png", side=48)
    save_image(once, tmp_path / "again" / "r.png")
    twice = load_image(tmp_path / "again" / "r.png", side=48)
    assert np.max(np.abs(once.data - twice.data)) <= 1 / 255 + 1e-12
    assert np.max(np.abs(once.data - im.data)) <= 0.5 / 255 + 1e-12


def test_make_pairs_intersection(rng):
    refs = [random_image(rng, sid=s) for s in "abc"]
    recs = [random_image(rng, sid=s) for s in "bcd"]
    res = make_pairs(refs, recs)
    assert [p.source_id for p in res] == ["b", "c"]
    assert res.unmatched == ["a", "d"]


def test_make_pairs_identity_and_zero_matches(rng):
    refs = [random_image(rng, sid=s) for s in "xyz"]
    res = make_pairs(refs, refs)
    assert len(res) == 3 and all(p.reference is p.reconstruction for p in res)
    with pytest.raises(DataError, match="zero matches"):
        make_pairs([random_image(rng, sid="a")], [random_image(rng, sid="z")])


def test_pair_requires_same_id_and_shape(rng):
    with pytest.raises(ValueError):
        ImagePair(random_image(rng, sid="a"), random_image(rng, sid="b"))
    with pytest.raises(ValueError):
        ImagePair(random_image(rng, side=32, sid="a"), random_image(rng, side=40, sid="a"))


def test_roundtrip_identity_and_blur(synthetic16):
    pairs = roundtrip_dataset(identity_ae(), synthetic16)
    assert all(np.array_equal(p.reference.data, p.reconstruction.data) for p in pairs)
    blurred = roundtrip_dataset(blur_ae(2.0), synthetic16[:4])
    for p in blurred:
        assert not np.array_equal(p.reference.data, p.reconstruction.data)
        assert np.isfinite(psnr(p))


def test_roundtrip_records_failures(rng):
    refs = [random_image(rng, sid=s) for s in "ab"]

    def encode(im):
        if im.source_id == "b":
            raise RuntimeError("boom")
        return LatentCode(np.array(im.data), 1)

    res = roundtrip_dataset(AutoencoderAdapter("flaky", encode, lambda z: z.data), refs)
    assert [p.source_id for p in res] == ["a"]
    assert list(res.failures) == ["b"] and "boom" in res.failures["b"]


def test_roundtrip_checks_latent_geometry(rng):
    bad = AutoencoderAdapter("bad", lambda im: LatentCode(np.zeros((4, 3, 3)), 16), lambda z: z.data)
    res = roundtrip_dataset(bad, [random_image(rng, sid="a")])
    assert len(res) == 0 and "inconsistent" in res.failures["a"]


def test_roundtrip_cache_writes_pngs(tmp_path, synthetic16):
    roundtrip_dataset(blur_ae(1.0, "b1"), synthetic16[:3], cache_dir=tmp_path)
    assert sorted(p.stem for p in (tmp_path / "b1").iterdir()) == sorted(
        im.source_id for im in synthetic16[:3])


def test_pair_manifest_roundtrip_is_deterministic(tmp_path, synthetic16):
    paths = {}
    for im in synthetic16[:5]:
        paths[im.source_id] = str(save_image(im, tmp_path / "img" / f"{im.source_id}.png"))
    pairs = make_pairs(synthetic16[:5][::-1], synthetic16[:5])
    write_pair_manifest(tmp_path / "m1.csv", pairs, paths, paths)
    write_pair_manifest(tmp_path / "m2.csv", list(reversed(pairs.pairs)), paths, paths)
    assert (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()
    with open(tmp_path / "m1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["source_id"] for r in rows] == sorted(paths)
    back = read_pair_manifest(tmp_path / "m1.csv", side=64)
    assert len(back) == 5


def test_model_record_rejects_overlap():
    rec = ModelRecord("m", reported_generation={"gFID": 1.0}, computed={"gFID": 2.0})
    with pytest.raises(ValueError):
        rec.validate(["gFID"])
    with pytest.raises(ValueError):
        ModelRecord("m", computed={"bogus": 1.0}).validate(["PSNR"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([32, 48, 64]))
def test_identity_roundtrip_is_exact(seed, side):
    im = random_image(np.random.default_rng(seed), side=side)
    out = identity_ae().roundtrip(im)
    assert np.array_equal(out.data, im.data)
