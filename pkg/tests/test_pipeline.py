import json
import logging
import sys

import numpy as np
import pytest

from driftbench.cli import main
from driftbench.config import CACHE_ENV, ConfigError, config_from_dict, hash_dict, load_config
from driftbench.core import DataError, roundtrip_dataset, save_image
from driftbench.metrics import PixelPCA, drift_record, feature_stats
from driftbench.pipeline import (
    FeatureCache, cached_projector, cmd_correlate, cmd_evaluate, cmd_score_controlled, load_condition_maps,
)
from driftbench.projectors import Projector, make_canny, make_gradient
from driftbench.synthetic import blur_ae, make_synthetic_images


def _cfg(tmp_path, **over):
    base = {
        "models": [{"name": "identity", "type": "identity"},
                   {"name": "blur1", "type": "blur", "sigma": 1.0},
                   {"name": "blur2", "type": "blur", "sigma": 2.0},
                   {"name": "blur4", "type": "blur", "sigma": 4.0}],
        "synthetic": {"n": 12, "side": 64, "seed": 0},
        "side": 64,
        "output_dir": str(tmp_path / "out"),
    }
    base.update(over)
    return config_from_dict(base)


def _counting(projector):
    calls = []

    def apply(im):
        calls.append(im.source_id)
        return projector(im)

    return Projector(projector.name, projector.kind, apply, projector.comparison,
                     projector.lipschitz_bound, dict(projector.params)), calls


# -- config ---------------------------------------------------------------------

def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        _cfg(tmp_path, colour="red")
    with pytest.raises(ConfigError):
        config_from_dict({"models": [{"name": "m", "type": "identity", "extra": 1}], "synthetic": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"models": [{"name": "m", "type": "blur"}], "synthetic": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"models": [{"name": "m", "type": "identity"}]})
    with pytest.raises(ConfigError):
        _cfg(tmp_path, metrics=["PSNR", "FID50k"])
    with pytest.raises(ConfigError):
        _cfg(tmp_path, extractors={"seg": {"backend": "subprocess", "command": ["x"]}})


def test_config_hash_is_stable(tmp_path):
    a = _cfg(tmp_path)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(a.to_dict(), indent=4))
    b = load_config(path)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() == _cfg(tmp_path, workers=3, cache_dir="elsewhere").config_hash()
    assert a.config_hash() != _cfg(tmp_path, seed=1).config_hash()
    assert hash_dict({"a": 1, "b": 2}) == hash_dict({"b": 2, "a": 1})


def test_cache_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "envcache"))
    assert _cfg(tmp_path).resolved_cache_dir() == tmp_path / "envcache"
    assert _cfg(tmp_path, cache_dir="x").resolved_cache_dir().name == "x"


# -- evaluate --------------------------------------------------------------------

def test_identity_row_and_absent_clip(tmp_path):
    cfg = _cfg(tmp_path, metrics=["PSNR", "SSIM", "Canny", "Depth", "CLIP"])
    m, manifest = cmd_evaluate(cfg)
    row = dict(zip(m.metrics, m.values[m.models.index("identity")]))
    assert row["PSNR"] == np.inf and row["SSIM"] == 1.0
    assert row["Canny"] == 0.0 and row["Depth"] == 0.0
    assert np.isnan(row["CLIP"])
    board = (tmp_path / "out" / "leaderboard.md").read_text()
    assert "CLIP: n/a (no extractor)" in board
    psnrs = m.column("PSNR")
    assert all(a > b for a, b in zip(psnrs, psnrs[1:]))


def test_outputs_are_stamped_and_deterministic(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_evaluate(cfg)
    out = tmp_path / "out"
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    cmd_evaluate(cfg)
    for name in ("metrics.csv", "correlation.csv", "metrics.json", "leaderboard.md"):
        assert (out / name).read_bytes() == first[name]
    h = cfg.config_hash()
    assert json.loads((out / "metrics.json").read_text())["metadata"]["config_hash"] == h
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == h
    assert f"config_hash: `{h}`" in (out / "leaderboard.md").read_text()
    saved = load_config(out / "config.json")
    assert saved.config_hash() == h
    # every other artifact is pinned by digest in the manifest
    import hashlib
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    first_manifest = json.loads(first["manifest.json"])
    first_manifest.pop("timings"), manifest.pop("timings")
    assert first_manifest == manifest


def test_reported_values_are_merged(tmp_path):
    models = [{"name": "a", "type": "identity", "reported": {"gFID": 2.0}},
              {"name": "b", "type": "blur", "sigma": 1.0, "reported": {"gFID": 3.0}},
              {"name": "c", "type": "blur", "sigma": 2.0}]
    m, _ = cmd_evaluate(_cfg(tmp_path, models=models, metrics=["PSNR"]))
    assert m.metrics == ["gFID", "PSNR"] and "gFID" in m.reported
    assert m.column("gFID")[:2].tolist() == [2.0, 3.0] and np.isnan(m.column("gFID")[2])


PLUGIN_OK = """
import io, sys
import numpy as np
from PIL import Image
from driftbench.projectors import encode_extractor_output
img = np.asarray(Image.open(io.BytesIO(sys.stdin.buffer.read())), dtype=np.float32) / 255
sys.stdout.buffer.write(encode_extractor_output((img[..., 0] > 0.5).astype(np.float32), "labels"))
"""


def test_failing_extractor_only_changes_its_columns(tmp_path):
    script = tmp_path / "seg.py"
    script.write_text(PLUGIN_OK)
    seg_ok = {"backend": "subprocess", "command": [sys.executable, str(script)], "num_classes": 2}
    seg_bad = {"backend": "subprocess", "command": [sys.executable, "-c", "raise SystemExit(1)"],
               "num_classes": 2}
    base = {"depth": {"backend": "gradient"}, "rfid": {"backend": "pixelpca"}}
    metrics = ["PSNR", "Canny", "Depth", "Seg", "Spatial"]
    good, _ = cmd_evaluate(_cfg(tmp_path, metrics=metrics, extractors={**base, "seg": seg_ok}))
    bad, manifest = cmd_evaluate(_cfg(tmp_path, metrics=metrics, extractors={**base, "seg": seg_bad}))
    for col in ("PSNR", "Canny", "Depth"):
        assert np.array_equal(good.column(col), bad.column(col))
    assert not np.isnan(good.column("Seg")).any() and not np.isnan(good.column("Spatial")).any()
    assert np.isnan(bad.column("Seg")).all() and np.isnan(bad.column("Spatial")).all()
    assert manifest.exclusions["blur1"]["Seg"] == 12


def test_directory_models(tmp_path):
    images = make_synthetic_images(6, side=64, seed=2)
    for im in images:
        save_image(im, tmp_path / "refs" / f"{im.source_id}.png")
    for im in images[1:]:
        save_image(blur_ae(1.0).roundtrip(im), tmp_path / "recon" / f"{im.source_id}.png")
    cfg = config_from_dict({
        "models": [{"name": "disk", "type": "directory", "path": str(tmp_path / "recon")}],
        "reference_dir": str(tmp_path / "refs"), "side": 64, "metrics": ["PSNR", "Canny"],
        "output_dir": str(tmp_path / "out"),
    })
    m, manifest = cmd_evaluate(cfg)
    assert manifest.exclusions["disk"]["unmatched"] == 1
    assert np.isfinite(m.column("PSNR")[0])


# -- cache -----------------------------------------------------------------------

def test_cache_hits_and_stamp_isolation(tmp_path, synthetic16):
    pairs = roundtrip_dataset(blur_ae(1.0), synthetic16[:4]).pairs
    canny, canny_calls = _counting(make_canny())
    grad, grad_calls = _counting(make_gradient(name="depth"))
    cache = FeatureCache(tmp_path)
    first = [drift_record(pairs, cached_projector(p, cache)).mean for p in (canny, grad)]
    assert len(canny_calls) == 8 and len(grad_calls) == 8
    again = [drift_record(pairs, cached_projector(p, FeatureCache(tmp_path))).mean for p in (canny, grad)]
    assert again == first and len(canny_calls) == 8 and len(grad_calls) == 8
    canny2, calls2 = _counting(make_canny(blur_sigma=1.5))
    drift_record(pairs, cached_projector(canny2, FeatureCache(tmp_path)))
    drift_record(pairs, cached_projector(grad, FeatureCache(tmp_path)))
    assert len(calls2) == 8 and len(grad_calls) == 8


def test_corrupt_cache_entry_is_recomputed(tmp_path, synthetic16, caplog):
    im = synthetic16[0]
    cache = FeatureCache(tmp_path)
    value = cache.get_or_compute("x", {"v": 1}, im, lambda i: i.data.mean(axis=0))
    files = list((tmp_path / "features" / "x").glob("*.npz"))
    assert len(files) == 1
    files[0].write_bytes(files[0].read_bytes()[:50])
    fresh = FeatureCache(tmp_path)
    with caplog.at_level(logging.WARNING):
        again = fresh.get_or_compute("x", {"v": 1}, im, lambda i: i.data.mean(axis=0))
    assert np.array_equal(value, again)
    assert fresh.invalid == 1 and "recomputing" in caplog.text


def test_evaluate_second_run_hits_cache(tmp_path):
    cfg = _cfg(tmp_path, cache_dir=str(tmp_path / "cache"), metrics=["Canny", "Depth"])
    cmd_evaluate(cfg)
    _, manifest = cmd_evaluate(cfg)
    stats = manifest.timings["cache"]
    assert stats["misses"] == 0 and stats["hits"] > 0


# -- correlate / score-controlled ---------------------------------------------------

def test_correlate_fixture_and_errors(tmp_path):
    m, c = cmd_correlate(fixture="table4", out_dir=tmp_path)
    assert (tmp_path / "correlation.csv").exists()
    assert c.get("Spatial", "Spatial") == 1.0
    with pytest.raises(DataError):
        cmd_correlate(fixture="table9")
    two, _ = cmd_evaluate(_cfg(tmp_path, models=[{"name": "a", "type": "identity"},
                                                 {"name": "b", "type": "blur", "sigma": 1.0}],
                               metrics=["PSNR"]))
    with pytest.raises(DataError, match="got 2"):
        cmd_correlate([tmp_path / "out" / "metrics.json"])


def test_correlate_from_metrics_json(tmp_path):
    cmd_evaluate(_cfg(tmp_path, metrics=["PSNR", "SSIM", "Canny"]))
    _, c = cmd_correlate([tmp_path / "out" / "metrics.json"])
    assert c.get("PSNR", "SSIM") == 1.0


def test_score_controlled_definitional_identity(tmp_path, synthetic16):
    proj = make_canny()
    refs = synthetic16
    pairs = roundtrip_dataset(blur_ae(2.0), refs).pairs
    generated = [p.reconstruction for p in pairs]
    conditions = {im.source_id: proj(im).data[0] for im in refs}
    ext = PixelPCA(8).fit(refs)
    stats = feature_stats(refs, ext)
    score = cmd_score_controlled(generated, conditions, proj, stats, ext)
    assert score.l1 == pytest.approx(drift_record(pairs, proj).mean, abs=1e-15)
    same = cmd_score_controlled(refs, conditions, proj, stats, ext)
    assert same.fid == 0.0 and same.l1 == 0.0
    with pytest.raises(DataError):
        cmd_score_controlled(generated, {"other": conditions[refs[0].source_id]}, proj)


def test_condition_maps_from_disk(tmp_path):
    np.save(tmp_path / "a.npy", np.zeros((8, 8)))
    maps = load_condition_maps(tmp_path)
    assert maps["a"].shape == (1, 8, 8)
    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        load_condition_maps(tmp_path / "empty")


# -- CLI ---------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    cfg = _cfg(tmp_path, metrics=["PSNR", "Canny"])
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert main(["evaluate", str(path), "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["evaluate", str(path), "--output-dir", str(tmp_path / "b"), "--set", "seed=0"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert main(["evaluate", str(path), "--set", "bogus=1"]) == 2
    assert main(["evaluate", str(tmp_path / "missing.json")]) == 2
    assert main(["correlate", str(tmp_path / "a" / "metrics.json")]) == 0
    assert main(["correlate", "--fixture", "table4", "--out", str(tmp_path / "corr")]) == 0
    bad = dict(cfg.to_dict(), synthetic=None, reference_dir=str(tmp_path / "nothing_here"))
    path.write_text(json.dumps(bad))
    (tmp_path / "nothing_here").mkdir()
    assert main(["evaluate", str(path)]) == 3
    assert "data error" in capsys.readouterr().err


def test_cli_simulate_and_report(tmp_path, capsys):
    assert main(["simulate", "--trials", "10", "--sizes", "8", "--out", str(tmp_path / "s.json")]) == 0
    rep = json.loads((tmp_path / "s.json").read_text())
    assert rep["trials"] == 10 and rep["prop1_cases"][0]["n"] == 8
    cmd_evaluate(_cfg(tmp_path, metrics=["PSNR", "Canny"]))
    assert main(["report", str(tmp_path / "out" / "metrics.json"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "correlation.csv").exists()


def test_cli_score_controlled(tmp_path, synthetic16, capsys):
    proj = make_canny()
    for im in synthetic16[:7]:
        save_image(im, tmp_path / "gen" / f"{im.source_id}.png")
    for im in synthetic16[:6]:
        save_image(im, tmp_path / "ref" / f"{im.source_id}.png")
    (tmp_path / "cond").mkdir()
    for im in synthetic16[:6]:
        np.save(tmp_path / "cond" / f"{im.source_id}.npy", proj(im).data[0])
    code = main(["score-controlled", "--generated", str(tmp_path / "gen"), "--conditions",
                 str(tmp_path / "cond"), "--reference-dir", str(tmp_path / "ref"), "--side", "64"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n"] == 6 and out["unmatched"] == ["syn_0006"] and out["fid"] == 0.0
    assert out["l1"] == 0.0


def test_cli_probe_smoke(tmp_path):
    code = main(["probe", "--n", "40", "--side", "32", "--max-epochs", "2", "--patience", "1",
                 "--batch-size", "16", "--lr", "1e-3", "--out", str(tmp_path)])
    assert code == 0
    rep = json.loads((tmp_path / "probe_result.json").read_text())
    assert rep["epochs_run"] <= 2 and (tmp_path / "probe.pt").exists()
    assert main(["probe", "--max-epochs", "5", "--patience", "9", "--out", str(tmp_path)]) == 2
