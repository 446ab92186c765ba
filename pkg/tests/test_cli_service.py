import filecmp
import json
import os
import shutil

import numpy as np
import pytest
from fastapi.testclient import TestClient

from hiercad import geometry
from hiercad import model as cm
from hiercad import synth
from hiercad.cli import main
from hiercad.service import create_app

TINY_NET = [
    "--d-model", "32", "--d-ff", "64", "--heads", "4",
    "--dropout", "0.0", "--n-layers", "2",
]


def square_doc():
    model = cm.CadModel([cm.ExtrudeStep([synth.rect_loop(0, 0, 63, 63)])])
    return cm.model_to_json(model)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny end-to-end pipeline: dataset, codebooks, generator, samples."""
    root = tmp_path_factory.mktemp("pipeline")
    ds, ck = str(root / "ds"), str(root / "ck")
    assert main(["preprocess", "--synthetic", "8", "--seed", "3", "--out", ds]) == 0
    for lv in ("loop", "profile", "solid"):
        assert main([
            "train-codebook", "--level", lv, "--data", ds, "--k", "8",
            "--steps", "40", "--batch-size", "8", "--warmup", "20",
            *TINY_NET, "--out", ck,
        ]) == 0
    assert main(["encode-codes", "--data", ds, "--ckpt", ck, "--out", ck]) == 0
    assert main([
        "train-generator", "--data", ds, "--ckpt", ck, "--steps", "40",
        "--batch-size", "4", "--warmup", "20", *TINY_NET, "--out", ck,
    ]) == 0
    return root


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        assert main(["sample", "--frobnicate"]) == 1

    def test_unknown_command_is_usage_error(self):
        assert main(["no-such-command"]) == 1

    def test_missing_input_is_data_error(self, tmp_path):
        assert main(["preprocess", "--input", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "ds")]) == 2

    def test_malformed_corpus_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"models": [{"steps": "nope"}]}')
        assert main(["preprocess", "--input", str(bad),
                     "--out", str(tmp_path / "ds")]) == 2

    def test_missing_checkpoint_is_runtime_error_free(self, tmp_path):
        # sample with no checkpoints present: runtime error, exit 3
        assert main(["sample", "--model-dir", str(tmp_path), "--n", "1",
                     "--out", str(tmp_path / "s")]) == 3

    def test_live_lock_blocks_and_stale_lock_is_cleared(self, tmp_path):
        lock = tmp_path / ".serve.lock"
        args = ["train-codebook", "--level", "loop",
                "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]
        lock.write_text(str(os.getpid()))  # this test process is alive
        assert main(args) == 3
        assert lock.exists()
        lock.write_text("999999999")  # no such pid: killed serve left it behind
        main(args)
        assert not lock.exists()


class TestPreprocess:
    def test_cap_violation_excluded_with_reason(self, tmp_path, capsys):
        docs = [square_doc()]
        six = square_doc()
        six["steps"] = six["steps"] * 6
        docs.append(six)
        corpus = tmp_path / "corpus.json"
        corpus.write_text(json.dumps(docs))
        out = tmp_path / "ds"
        assert main(["preprocess", "--input", str(corpus), "--out", str(out)]) == 0
        captured = capsys.readouterr()
        assert "excluded model 1: max_steps" in captured.err
        card = json.loads((out / "card.json").read_text())
        assert card["excluded"] == [{"index": 1, "reason": "max_steps"}]
        assert len(json.loads((out / "models.json").read_text())) == 1

    def test_outputs_present(self, pipeline):
        ds = pipeline / "ds"
        for name in ("models.json", "properties.jsonl", "card.json", "run_manifest.json"):
            assert (ds / name).exists()


class TestManifestDeterminism:
    def test_sample_rerun_bit_identical(self, pipeline, tmp_path):
        ck = str(pipeline / "ck")
        out = str(tmp_path / "s1")
        assert main(["sample", "--model-dir", ck, "--n", "2", "--p", "0.9",
                     "--seed", "7", "--out", out]) == 0
        first = tmp_path / "first"
        shutil.copytree(out, first)
        assert main(["sample", "--from-manifest",
                     os.path.join(out, "run_manifest.json")]) == 0
        for name in ("samples.json", "run_manifest.json"):
            assert filecmp.cmp(first / name, os.path.join(out, name), shallow=False)

    def test_preprocess_rerun_bit_identical(self, pipeline, tmp_path):
        ds = str(pipeline / "ds")
        first = tmp_path / "first"
        shutil.copytree(ds, first)
        assert main(["preprocess", "--from-manifest",
                     os.path.join(ds, "run_manifest.json")]) == 0
        for name in ("models.json", "properties.jsonl", "card.json"):
            assert filecmp.cmp(first / name, os.path.join(ds, name), shallow=False)


class TestEditCommand:
    def test_edit_and_level_mismatch(self, pipeline, tmp_path, capsys):
        ck = str(pipeline / "ck")
        codes = json.loads((pipeline / "ck" / "codes.json").read_text())[0]["codes"]
        path = tmp_path / "codes.json"
        path.write_text(json.dumps(codes))
        assert main(["edit", "--model-dir", ck, "--codes", str(path),
                     "--slot-path", "solid", "--level", "solid", "--new-code", "5"]) == 0
        out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert out["solid"] == 5
        assert main(["edit", "--model-dir", ck, "--codes", str(path),
                     "--slot-path", "solid", "--level", "loop", "--new-code", "1"]) == 2


class TestExportAndEvaluate:
    def test_export_obj_xyz_vox(self, tmp_path):
        doc = tmp_path / "model.json"
        doc.write_text(json.dumps(square_doc()))
        obj = tmp_path / "cube.obj"
        assert main(["export-mesh", "--model", str(doc), "--out", str(obj)]) == 0
        text = obj.read_text()
        assert text.startswith("v ") and "g step0_union" in text
        n_verts = sum(1 for l in text.splitlines() if l.startswith("v "))
        for line in text.splitlines():
            if line.startswith("f "):
                assert all(1 <= int(i) <= n_verts for i in line.split()[1:])
        xyz = tmp_path / "cube.xyz"
        assert main(["export-mesh", "--model", str(doc), "--out", str(xyz),
                     "--points", "64", "--resolution", "32"]) == 0
        assert np.loadtxt(xyz).shape == (64, 3)
        vox = tmp_path / "cube.vox"
        assert main(["export-mesh", "--model", str(doc), "--out", str(vox),
                     "--resolution", "32"]) == 0
        assert vox.read_bytes()[:4] == b"HNCV"

    def test_evaluate_prints_report(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        for d in ("gen", "gt"):
            os.makedirs(tmp_path / d)
            for i in range(2):
                np.savetxt(tmp_path / d / f"{i}.xyz", rng.random((16, 3)))
        assert main(["evaluate", "--gen", str(tmp_path / "gen"),
                     "--gt", str(tmp_path / "gt"), "--points", "16"]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        for key in ("cov_cd", "mmd_cd", "jsd", "novel", "unique"):
            assert key in report


@pytest.fixture(scope="module")
def client(pipeline):
    return TestClient(create_app(str(pipeline / "ck")))


class TestService:
    def test_health(self, client):
        doc = client.get("/health").json()
        assert doc["status"] == "ok"
        assert doc["checkpoints"]["encoder.ckpt"] is True

    def test_openapi_at_spec(self, client):
        doc = client.get("/spec").json()
        assert "/generate" in doc["paths"]

    def test_model_registry_and_mesh(self, client, pipeline):
        models = json.loads((pipeline / "ck" / "models.json").read_text())
        model = cm.model_from_json(models[0])
        mid = str(cm.hash_model(cm.tokenize_model(model)))
        got = client.get(f"/model/{mid}")
        assert got.status_code == 200 and got.json() == models[0]
        mesh = client.get(f"/mesh/{mid}")
        assert mesh.status_code == 200 and "g step0" in mesh.text

    def test_unknown_id_404(self, client):
        assert client.get("/model/12345").status_code == 404
        assert client.get("/mesh/12345").status_code == 404

    def test_post_mesh_returns_obj(self, client):
        r = client.post("/mesh", json={"model": square_doc()})
        assert r.status_code == 200
        assert r.text.startswith("v ") and "g step0_union" in r.text
        assert any(l.startswith("f ") for l in r.text.splitlines())

    def test_clusters(self, client):
        r = client.get("/codebook/loop/clusters")
        assert r.status_code == 200
        assert all("code" in rec and "members" in rec for rec in r.json())
        assert client.get("/codebook/nope/clusters").status_code == 400

    def test_codes_edit_and_409(self, client, pipeline):
        codes = json.loads((pipeline / "ck" / "codes.json").read_text())[0]["codes"]
        r = client.post("/codes/edit", json={
            "codes": codes, "slot_path": ["solid"], "level": "solid", "new_code": 3,
        })
        assert r.status_code == 200 and r.json()["codes"]["solid"] == 3
        r = client.post("/codes/edit", json={
            "codes": codes, "slot_path": ["solid"], "level": "loop", "new_code": 3,
        })
        assert r.status_code == 409

    def test_malformed_request_400(self, client):
        assert client.post("/generate", json={"seed": 1}).status_code == 400
        r = client.post(
            "/generate",
            content=b"{not json",
            headers={"content-type": "application/json"},
        )
        assert r.status_code == 400

    def test_generate_unconditional(self, client):
        r = client.post("/generate", json={
            "mode": "unconditional", "n": 2, "p": 0.9, "seed": 5,
        })
        assert r.status_code == 200
        doc = r.json()
        assert len(doc["models"]) + doc["dropped"] == 2
        assert len(doc["models"]) == len(doc["codes"])

    def test_regenerate_deterministic(self, client, pipeline):
        codes = json.loads((pipeline / "ck" / "codes.json").read_text())[0]["codes"]
        body = {"codes": codes, "partial": None, "seed": 0}
        r1 = client.post("/regenerate", json=body)
        r2 = client.post("/regenerate", json=body)
        assert r1.status_code in (200, 500)
        assert r1.status_code == r2.status_code and r1.content == r2.content

    def test_autocomplete_endpoint(self, client):
        r = client.post("/autocomplete", json={
            "partial": square_doc(), "n": 2, "p": 0.9, "seed": 1,
        })
        assert r.status_code == 200
        doc = r.json()
        assert len(doc["models"]) + doc["dropped"] == 2
