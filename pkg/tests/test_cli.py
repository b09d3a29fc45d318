import csv
import json

import pytest

from croma.cli import main
from croma.train import load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def last_json(out: str) -> dict:
    start = out.rfind("\n{") + 1 if out.rfind("\n{") >= 0 else out.find("{")
    return json.loads(out[start:])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "train"), "--n", "48"]) == 0
    assert main(["gen", "--out", str(root / "val"), "--n", "24", "--start", "1000"]) == 0
    assert main(["pretrain", "--dataset", str(root / "train"), "--out", str(root / "run"), "--steps", "3",
                 "--batch-size", "4", "--patch-size", "8", "--log-every", "0"]) == 0
    ck = root / "run" / "checkpoint"
    for split in ("train", "val"):
        assert main(["embed", "--checkpoint", str(ck), "--dataset", str(root / split), "--source", "concat",
                     "--split", split, "--out", str(root / f"emb_{split}")]) == 0
    return root


def test_gen_reports_counts(tmp_path, capsys):
    code, out = run(capsys, "gen", "--out", tmp_path / "d", "--n", 12)
    rep = json.loads(out)
    assert code == 0 and rep["n"] == 12 and sum(rep["class_counts"]) == 12


def test_pretrain_echoes_resolved_config(workspace, tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"steps": 2, "batch_size": 4, "model": {"patch_size": 8}}))
    monkeypatch.setenv("CROMA_SEED", "9")
    code, out = run(capsys, "pretrain", "--config", cfg, "--dataset", workspace / "train", "--out", tmp_path / "r",
                    "--steps", 1, "--log-every", 0)
    assert code == 0
    resolved = json.loads(out[: out.index("\n}\n") + 2])
    assert resolved["steps"] == 1 and resolved["seed"] == 9 and resolved["model"]["patch_size"] == 8
    assert resolved["effective_lr"] == 4 * 8e-3 / 256
    _, _, manifest = load_checkpoint(tmp_path / "r" / "checkpoint")
    assert manifest["seed"] == 9 and manifest["step"] == 1


def test_embed_wrote_concat_tables(workspace):
    meta = json.loads((workspace / "emb_val" / "table.json").read_text())
    assert meta["source"] == "concat" and meta["split"] == "val"


@pytest.mark.parametrize(
    "cmd",
    [["probe", "--epochs", "3"], ["probe", "--kind", "mlp", "--epochs", "3"], ["knn", "--k", "5"], ["kmeans", "--restarts", "2"]],
)
def test_evaluation_commands(workspace, tmp_path, capsys, cmd):
    code, out = run(capsys, *cmd, "--train", workspace / "emb_train", "--val", workspace / "emb_val",
                    "--out", tmp_path / "rep.json")
    rep = json.loads(out)
    assert code == 0 and rep == json.loads((tmp_path / "rep.json").read_text())
    value = rep.get("value", rep.get("accuracy"))
    assert 0.0 <= value <= 1.0


def test_sparse_probe_csv(workspace, tmp_path, capsys):
    code, out = run(capsys, "sparse-probe", "--train", workspace / "emb_train", "--val", workspace / "emb_val",
                    "--class", 0, "--ks", 1, 4, "--epochs", 3, "--csv", tmp_path / "curve.csv")
    rep = json.loads(out)
    rows = list(csv.reader(open(tmp_path / "curve.csv")))
    assert code == 0 and rows[0] == ["k", "f1"] and [r[0] for r in rows[1:]] == ["1", "4"]
    assert len(rep["ranking"]) == 4


def test_extrapolate_and_diagnose(workspace, capsys):
    ck = workspace / "run" / "checkpoint"
    code, out = run(capsys, "extrapolate", "--checkpoint", ck, "--sizes", 24, 48)
    rep = json.loads(out)
    assert code == 0 and set(rep["accuracy"]) == {"24", "48"} and rep["relative_drop"]["24"] == 0.0
    code, out = run(capsys, "diagnose", "--checkpoint", ck, "--dataset", workspace / "val", "--n", 6)
    rep = json.loads(out)
    assert code == 0 and set(rep["invariance"]) == {"hflip", "vflip", "rot90", "rot180", "rot270"}
    assert rep["chance_ce"] == pytest.approx(2.1972245773362196)


def test_bias_prints_distance_grid(capsys):
    code, out = run(capsys, "bias", "--rows", 2, "--cols", 2, "--heads", 4)
    lines = out.splitlines()
    assert code == 0 and lines[0].startswith("slopes: 0.25 ")
    assert lines[2:] == ["0.0 1.0 1.0 1.4", "1.0 0.0 1.4 1.0", "1.0 1.4 0.0 1.0", "1.4 1.0 1.0 0.0"]


def test_gradcheck_command(capsys):
    code, out = run(capsys, "gradcheck", "--batch-size", 2)
    assert code == 0 and json.loads(out)["passed"] is True
    code, out = run(capsys, "gradcheck", "--batch-size", 2, "--tol", 0)
    assert code == 1 and json.loads(out)["passed"] is False


def test_errors_exit_with_status_2(tmp_path, capsys):
    assert main(["embed", "--checkpoint", str(tmp_path / "nope"), "--dataset", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert main(["pretrain", "--dataset", str(tmp_path), "--steps", "1"]) == 2
    assert main(["pretrain", "--dataset", str(tmp_path), "--out", str(tmp_path / "r"), "--patch-size", "5"]) == 2
    assert "error" in capsys.readouterr().err
