import json
import subprocess
import sys

import numpy as np

from cage import checkpoint, fusion, labels, tensor
from conftest import run_cli


def test_gradcheck_pass_and_json():
    code, out, _ = run_cli("gradcheck", "--json")
    assert code == 0
    rep = json.loads(out)
    assert rep["passed"] and rep["worst"]["error"] < 1e-4
    assert "q_proj" in rep["runs"][0]["groups"]


def test_gradcheck_sabotage_exits_1():
    code, out, err = run_cli("gradcheck", "--sabotage", "film_fc1.w")
    assert code == 1
    assert "film_fc1.w" in err and "FAIL" in out
    assert fusion.SABOTAGE_PARAM is None


def test_usage_errors_exit_2(tmp_path):
    assert run_cli("gradcheck", "--tol", "abc")[0] == 2
    assert run_cli("no-such-command")[0] == 2
    bad = tmp_path / "c.json"
    bad.write_text('{"seed": 0, "sede": 1}')
    code, _, err = run_cli("--config", bad, "cost")
    assert code == 2 and "sede" in err
    bad.write_text("{not json")
    assert run_cli("--config", bad, "cost")[0] == 2
    bad.write_text(json.dumps({"cage": {"c_in": 8, "c_out": 8, "embed_dim": 16,
                                        "proj_dim": 7, "heads": 2}}))
    assert run_cli("--config", bad, "cost")[0] == 2
    assert run_cli("audit", "--expect", "P9=3")[0] == 2


def test_audit(tmp_path):
    code, out, _ = run_cli("audit", "--no-forward")
    rep = json.loads(out)
    assert code == 0 and rep["passed"]
    assert [lv["actual_shape"] for lv in rep["levels"]] == [
        [1, 128, 80, 80], [1, 256, 40, 40], [1, 512, 20, 20]]
    code, _, err = run_cli("audit", "--no-forward", "--expect", "P4=128")
    assert code == 1 and "P4" in err


def test_cost_outputs(tmp_path):
    code, out, _ = run_cli("cost", "--baseline", "--csv", tmp_path / "c.csv",
                           "--figures", tmp_path / "figs")
    assert code == 0
    rep = json.loads(out)
    assert set(rep["reports"]) == {"P3", "P4", "P5"}
    assert len(rep["comparison"]["levels"]) == 3
    assert "FLOPs = 2 * MACs" in rep["convention"]
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "report,layer,params,macs,flops,nonlinear"
    assert any(r.startswith("P5/baseline,total,") for r in rows)
    assert (tmp_path / "figs" / "cost_comparison.png").stat().st_size > 0
    code, out, _ = run_cli("cost")
    assert "comparison" not in json.loads(out)


def test_cost_custom_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"cage": {"c_in": 8, "c_out": 8, "embed_dim": 16,
                                        "proj_dim": 8, "heads": 2}, "height": 4, "width": 4}))
    code, out, _ = run_cli("--config", cfg, "cost", "--tokens", "3", "--baseline")
    rep = json.loads(out)
    assert code == 0 and rep["reports"]["custom"]["input_spec"]["H"] == 4
    assert rep["comparison"]["levels"][0]["level"] == "custom"


def test_init_and_demo_forward(tmp_path, rng):
    assert run_cli("--seed", "3", "init", "--out", tmp_path / "ck")[0] == 0
    params, cfg = checkpoint.load_checkpoint(tmp_path / "ck")
    assert params.weights_digest() == fusion.init_params(cfg, 3).weights_digest()
    x = rng.standard_normal((2, 4, 4, cfg.c_in))
    tensor.save(tmp_path / "x.cagt", x)
    tensor.save(tmp_path / "t.cagt", rng.standard_normal((2, 3, cfg.embed_dim)))
    code, out, _ = run_cli("demo-forward", "--checkpoint", tmp_path / "ck", "--image",
                           tmp_path / "x.cagt", "--text", tmp_path / "t.cagt", "--out",
                           tmp_path / "y.cagt", "--stats", "-", "--channels-last")
    assert code == 0
    stats = json.loads(out)
    assert stats["output_shape"] == [2, cfg.c_out, 4, 4]
    assert set(stats["activations"]) == set(fusion.CageActivations.NAMES)
    y = tensor.load(tmp_path / "y.cagt")
    np.testing.assert_allclose(y, tensor.to_channels_first(x), atol=1e-6)


def test_demo_forward_bad_tensor(tmp_path):
    run_cli("init", "--out", tmp_path / "ck")
    (tmp_path / "x.cagt").write_bytes(b"garbage")
    code, _, err = run_cli("demo-forward", "--checkpoint", tmp_path / "ck", "--image",
                           tmp_path / "x.cagt", "--text", tmp_path / "x.cagt", "--out",
                           tmp_path / "y.cagt", "--stats", "-")
    assert code == 2 and "error" in err


def test_checkpoint_tamper_detected(tmp_path):
    run_cli("init", "--out", tmp_path / "ck")
    tensor.save(tmp_path / "ck" / "w_k.cagt", np.zeros((3, 3)))
    code, _, err = run_cli("demo-forward", "--checkpoint", tmp_path / "ck", "--image", "x",
                           "--text", "t", "--out", "y", "--stats", "-")
    assert code == 2 and "w_k" in err


def test_dedup_fixture(tmp_path, fixtures):
    code, out, _ = run_cli("dedup", "--manifest", fixtures / "dedup_manifest.json",
                           "--embeddings", fixtures / "dedup_embeddings.jsonl",
                           "--out", tmp_path / "m.json", "--drop-log", tmp_path / "drops.jsonl")
    assert code == 0
    expected = json.loads((fixtures / "dedup_expected.json").read_text())
    assert json.loads(out)["kept"] == expected["kept"]
    m = labels.DatasetManifest.load(tmp_path / "m.json")
    assert [im.id for im in m.images] == expected["kept"]
    assert len((tmp_path / "drops.jsonl").read_text().splitlines()) == 3


def test_convert_fixture(tmp_path, fixtures):
    assert run_cli("convert", "--manifest", fixtures / "mixed_geometry.json",
                   "--out", tmp_path / "std.json")[0] == 0
    m = labels.DatasetManifest.load(tmp_path / "std.json")
    assert all(isinstance(a.geometry, labels.AABB) for a in m.annotations)
    assert m.annotations[1].geometry == labels.AABB(3, 4, 7, 6)


def test_convert_malformed(tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"dataset": "x", "route": "FOD", "images": [],
                               "annotations": [{"image_id": "zz", "category": "c",
                                                "geometry": {"type": "aabb"}}]}))
    assert run_cli("convert", "--manifest", bad, "--out", tmp_path / "o.json")[0] == 2
    assert run_cli("convert", "--manifest", tmp_path / "missing.json",
                   "--out", tmp_path / "o.json")[0] == 2
    assert not (tmp_path / "o.json").exists()


def test_reclass_pipeline(tmp_path, fixtures):
    m = fixtures / "caption_a.json"
    assert run_cli("reclass", "plan", "--manifest", m, "--ambiguous", "car,truck",
                   "--out", tmp_path / "jobs.json")[0] == 0
    jobs = json.loads((tmp_path / "jobs.json").read_text())
    assert [j["job_id"] for j in jobs] == ["a1#0", "a1#2"]
    (tmp_path / "mock.json").write_text(json.dumps({"car": "sedan", "truck": "lorry"}))
    assert run_cli("reclass", "classify", "--jobs", tmp_path / "jobs.json", "--mock",
                   tmp_path / "mock.json", "--out", tmp_path / "resp.json")[0] == 0
    (tmp_path / "allowed.txt").write_text("sedan\n")
    code, out, _ = run_cli("reclass", "apply", "--manifest", m, "--jobs", tmp_path / "jobs.json",
                           "--responses", tmp_path / "resp.json", "--allowed",
                           tmp_path / "allowed.txt", "--out", tmp_path / "new.json",
                           "--rejections", tmp_path / "rej.jsonl")
    assert code == 0 and json.loads(out) == {"resolved": 1, "rejected": 1}
    new = labels.DatasetManifest.load(tmp_path / "new.json")
    assert [a.category for a in new.annotations] == ["sedan", "pedestrian", "truck"]
    (tmp_path / "resp.json").write_text('{"ghost#9": "x"}')
    assert run_cli("reclass", "apply", "--manifest", m, "--jobs", tmp_path / "jobs.json",
                   "--responses", tmp_path / "resp.json", "--out", tmp_path / "n2.json")[0] == 2


def test_caption_goldens(tmp_path, fixtures):
    for name in "abc":
        out_dir = tmp_path / name
        assert run_cli("caption", "--manifest", fixtures / f"caption_{name}.json",
                       "--out", out_dir)[0] == 0
        for golden in (fixtures / f"golden_{name}").iterdir():
            assert (out_dir / golden.name).read_bytes() == golden.read_bytes()


def test_eval_perfect_fixture(tmp_path, fixtures):
    code, out, _ = run_cli("eval", "--dets", fixtures / "perfect_dets.jsonl", "--gts",
                           fixtures / "perfect_gts.jsonl", "--json", tmp_path / "r.json",
                           "--figures", tmp_path / "f")
    assert code == 0 and out.strip() == "AP50=1.0 mAP=1.0"
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["AP50"] == 1.0 and "0.50:0.05:0.95" in rep["protocol"]
    assert (tmp_path / "f" / "pr_curves.png").exists()


def test_eval_empty_gt_exit_2(tmp_path, fixtures):
    (tmp_path / "g.jsonl").write_text("")
    assert run_cli("eval", "--dets", fixtures / "perfect_dets.jsonl",
                   "--gts", tmp_path / "g.jsonl")[0] == 2


def test_console_script_entry_point(fixtures):
    proc = subprocess.run([sys.executable, "-m", "cage.cli", "eval", "--dets",
                           str(fixtures / "perfect_dets.jsonl"), "--gts",
                           str(fixtures / "perfect_gts.jsonl")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.strip() == "AP50=1.0 mAP=1.0"
    proc = subprocess.run([sys.executable, "-m", "cage.cli", "--help"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
