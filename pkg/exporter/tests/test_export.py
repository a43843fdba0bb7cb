import hashlib
import json

import numpy as np
import pytest
import torch
from conftest import make_timm_state_dict, run_engine, write_ppm

from cft_exporter.container import TargetConfig, canonical_entries, write_container
from cft_exporter.errors import ExportError
from cft_exporter.export import export_checkpoint, synthesize_reuse


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_export_is_idempotent(small_ckpt, tmp_path):
    ckpt, _ = small_ckpt
    first = export_checkpoint(ckpt, tmp_path / "a.cft1")
    second = export_checkpoint(ckpt, tmp_path / "b.cft1")
    assert _sha(first.out_path) == _sha(second.out_path)
    assert first.manifest["cft1_sha256"] == _sha(first.out_path)
    # manifests agree on everything except nothing — they are path-free
    assert first.manifest == second.manifest


def test_manifest_accounts_for_every_container_tensor(small_ckpt, tmp_path):
    ckpt, _ = small_ckpt
    result = export_checkpoint(ckpt, tmp_path / "w.cft1")
    required = [name for name, _ in
                canonical_entries(result.config, result.config.embed_dim)]
    produced = sorted(set(result.manifest["mapping"].values())
                      | set(result.manifest["synthesized"]["tensors"]))
    assert produced == sorted(required)
    # converted and synthesized sets are disjoint
    assert not (set(result.manifest["mapping"].values())
                & set(result.manifest["synthesized"]["tensors"]))
    assert result.manifest["synthesized"]["tensors"] == sorted(
        ("reuse.norm.gain", "reuse.norm.bias", "reuse.mlp_in.weight",
         "reuse.mlp_in.bias", "reuse.mlp_out.weight", "reuse.mlp_out.bias"))
    assert result.manifest["synthesized"]["seed"] == 0


def test_manifest_is_valid_sorted_json(small_ckpt, tmp_path):
    ckpt, _ = small_ckpt
    result = export_checkpoint(ckpt, tmp_path / "w.cft1")
    text = result.manifest_path.read_text()
    assert json.loads(text) == result.manifest
    assert text == json.dumps(result.manifest, sort_keys=True, indent=2) + "\n"


def test_reuse_synthesis_is_seeded_and_conventional():
    a = synthesize_reuse(16, seed=3)
    b = synthesize_reuse(16, seed=3)
    c = synthesize_reuse(16, seed=4)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    assert any((a[n] != c[n]).any() for n in a if n.endswith(".weight"))
    assert (a["reuse.norm.gain"] == 1).all()
    assert not a["reuse.mlp_in.bias"].any()
    assert a["reuse.mlp_in.weight"].shape == (16, 16)
    assert a["reuse.mlp_in.weight"].dtype == np.float32


def test_engine_loads_exported_container(small_ckpt, tmp_path, engine_cli):
    ckpt, _ = small_ckpt
    result = export_checkpoint(ckpt, tmp_path / "w.cft1")
    image = write_ppm(tmp_path / "x.ppm", result.config.image_px,
                      result.config.image_px, seed=2)
    out = run_engine(engine_cli, "infer", "--weights", str(result.out_path),
                     "--image", str(image), "--eta", "0.5")
    trace = json.loads(out)
    assert trace["schema"] == "cft-trace-v1"
    assert len(json.loads(run_engine(
        engine_cli, "infer", "--weights", str(result.out_path),
        "--image", str(image), "--eta", "1", "--emit-logits",
    ))["fine"]["logits"]) == result.config.num_classes


def test_golden_fixture_matches_engine_at_small_scale(small_ckpt, tmp_path,
                                                      engine_cli):
    ckpt, _ = small_ckpt
    image = write_ppm(tmp_path / "g.ppm", 16, 16, seed=9)
    result = export_checkpoint(ckpt, tmp_path / "w.cft1", golden_image=image)
    golden = json.loads(result.golden_path.read_text())
    assert golden["schema"] == "cft-golden-v1"
    assert golden["image_sha256"] == hashlib.sha256(
        image.read_bytes()).hexdigest()

    trace = json.loads(run_engine(
        engine_cli, "infer", "--weights", str(result.out_path),
        "--image", str(image), "--eta", "1", "--alpha", "1", "--no-reuse",
        "--emit-logits"))
    gap = np.abs(np.array(trace["fine"]["logits"])
                 - np.array(golden["logits"])).max()
    assert gap <= 1e-3


def test_ema_start_defaults_to_depth_when_shallow(tmp_path):
    sd = make_timm_state_dict(depth=2)
    torch.save(sd, tmp_path / "c.pth")
    result = export_checkpoint(tmp_path / "c.pth", tmp_path / "w.cft1")
    assert result.config.ema_start == 2
    deep = make_timm_state_dict(depth=5)
    torch.save(deep, tmp_path / "d.pth")
    result = export_checkpoint(tmp_path / "d.pth", tmp_path / "w2.cft1")
    assert result.config.ema_start == 4


def test_write_container_rejects_bad_tensor_sets(tmp_path):
    cfg = TargetConfig(coarse_grid=1, patch_px=2, embed_dim=4, depth=1,
                       heads=2, num_classes=2, alpha=0.5, beta=0.9,
                       ema_start=1, mlp_ratio=2)
    tensors = {name: np.zeros(shape, dtype=np.float32)
               for name, shape in canonical_entries(cfg, 4)}
    write_container(tensors, cfg, tmp_path / "ok.cft1")  # sanity

    broken = dict(tensors)
    del broken["class_token"]
    broken["bogus"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(ExportError) as err:
        write_container(broken, cfg, tmp_path / "bad.cft1")
    assert "class_token" in str(err.value) and "bogus" in str(err.value)

    misshapen = dict(tensors)
    misshapen["head.linear.bias"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(ExportError, match="head.linear.bias"):
        write_container(misshapen, cfg, tmp_path / "bad2.cft1")


def test_cli_reports_and_fails_cleanly(small_ckpt, tmp_path, capsys):
    from cft_exporter.cli import main

    ckpt, _ = small_ckpt
    out = tmp_path / "w.cft1"
    assert main([str(ckpt), str(out), "--reuse-seed", "7"]) == 0
    stdout = capsys.readouterr().out
    assert "wrote" in stdout and "manifest:" in stdout
    manifest = json.loads((tmp_path / "w.cft1.manifest.json").read_text())
    assert manifest["synthesized"]["seed"] == 7

    assert main([str(tmp_path / "missing.pth"), str(out)]) == 1
    assert "error:" in capsys.readouterr().err
