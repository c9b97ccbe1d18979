from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from probex.cli import git_blob_hash, main, params_table
from probex.zoo import load_zoo


@pytest.fixture(scope="module")
def cli_zoo(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "zoo"
    assert main(["generate-zoo", "--mode", "tree", "--n", "20", "--seed", "2", "--out", str(out)]) == 0
    return out


def test_git_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_generate_zoo_is_deterministic(tmp_path, cli_zoo):
    again = tmp_path / "again"
    assert main(["generate-zoo", "--mode", "tree", "--n", "20", "--seed", "2", "--out", str(again)]) == 0
    assert (cli_zoo / "manifest.json").read_bytes() == (again / "manifest.json").read_bytes()
    for f in (cli_zoo / "tensors").iterdir():
        assert f.read_bytes() == (again / "tensors" / f.name).read_bytes()
    run = json.loads((again / "run.json").read_text())
    assert run["config"]["n"] == 20 and run["results"]["models"] == 20


def test_generate_zoo_bad_inputs(tmp_path, cli_zoo, capsys):
    assert main(["generate-zoo", "--n", "0", "--out", str(tmp_path / "z0")]) == 2
    assert main(["generate-zoo", "--n", "3", "--mode", "bogus", "--out", str(tmp_path / "zb")]) == 2
    assert main(["generate-zoo", "--n", "3", "--out", str(cli_zoo)]) == 2
    assert "--force" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["generate-zoo", "--n", "x", "--out", str(tmp_path / "zx")])
    assert exc.value.code == 2


def test_force_overwrites(tmp_path):
    out = tmp_path / "z"
    out.mkdir()
    (out / "stale.txt").write_text("old")
    assert main(["generate-zoo", "--n", "3", "--out", str(out), "--force"]) == 0
    assert not (out / "stale.txt").exists()


@pytest.mark.slow
def test_multitree_split_sizes(tmp_path):
    out = tmp_path / "mt"
    assert main(["generate-zoo", "--mode", "multitree:4", "--n", "400", "--out", str(out)]) == 0
    zoo = load_zoo(out)
    ids, counts = np.unique([r.tree_id for r in zoo.records], return_counts=True)
    assert len(ids) == 4 and counts.tolist() == [100] * 4


def test_train_then_eval_reproduces_validation(tmp_path, cli_zoo, capsys):
    run = tmp_path / "run"
    args = ["train", "--zoo", str(cli_zoo), "--model", "probex-linear", "--epochs", "15", "--ranks", "4", "--out", str(run)]
    assert main(args) == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    hist = list(csv.DictReader(open(run / "history.csv")))
    assert len(hist) == 15
    ev = tmp_path / "ev"
    assert main(["eval", "--zoo", str(cli_zoo), "--model-dir", str(run), "--split", "val", "--out", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["aggregate"] == res["best_val_metric"]
    meta = json.loads((run / "run.json").read_text())
    assert meta["input_hash"] and "zoo/manifest.json" in meta["inputs"]
    assert meta["config"]["train_config"]["epochs"] == 15


def test_train_usage_errors(tmp_path, cli_zoo):
    assert main(["train", "--zoo", str(cli_zoo), "--task", "align", "--out", str(tmp_path / "a")]) == 2
    assert main(["train", "--zoo", str(tmp_path / "nowhere"), "--out", str(tmp_path / "b")]) == 2
    assert main(["train", "--zoo", str(cli_zoo), "--lr", "-1", "--out", str(tmp_path / "c")]) == 2
    assert main(["train", "--zoo", str(cli_zoo), "--layer", "fc9", "--out", str(tmp_path / "d")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, cli_zoo, capsys):
    args = ["train", "--zoo", str(cli_zoo), "--epochs", "50", "--lr", "1e300", "--ranks", "4", "--out", str(tmp_path / "n")]
    assert main(args) == 3
    assert "numeric" in capsys.readouterr().err
    assert json.loads((tmp_path / "n" / "run.json").read_text())["results"]["error"]


def test_config_file(tmp_path, cli_zoo):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "ranks": [2, 2, 2], "model": "probex-linear"}))
    out = tmp_path / "c"
    assert main(["train", "--zoo", str(cli_zoo), "--config", str(cfg), "--epochs", "4", "--out", str(out)]) == 0
    tc = json.loads((out / "run.json").read_text())["config"]["train_config"]
    assert tc["epochs"] == 4 and tc["ranks"] == [2, 2, 2]
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["train", "--zoo", str(cli_zoo), "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    cfg.write_text("{not json")
    assert main(["train", "--zoo", str(cli_zoo), "--config", str(cfg), "--out", str(tmp_path / "e")]) == 2


def test_route_command(tmp_path, cli_zoo, capsys):
    assert main(["route", "--zoo", str(cli_zoo), "--k", "1", "--out", str(tmp_path / "r")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["k"] == 1 and res["test_assignment_accuracy"] == 1.0
    assert (tmp_path / "r" / "router" / "router.json").exists()


def test_check_equivalence(capsys):
    assert main(["check-equivalence", "--trials", "20"]) == 0
    assert json.loads(capsys.readouterr().out)["pass"] is True
    assert main(["check-equivalence", "--trials", "5", "--tol", "0"]) == 1
    assert main(["check-equivalence", "--dims", "1,1,1,1,1,1", "--trials", "5"]) == 0
    assert main(["check-equivalence", "--dims", "1,2,3"]) == 2


def test_params_numbers(capsys):
    t = params_table(768, 768, 100, (128, 128, 128))
    assert t["probex"] == 2_306_560 and t["dense"] == 58_982_400 and t["ratio"] >= 25
    assert params_table(2048, 512, 100, (128, 128, 128))["dense"] == 104_857_600
    assert params_table(1, 1, 1, (1, 1, 1)) == {"probex": 4, "dense": 1, "ratio": 0.25}
    assert main(["params"]) == 0
    text = capsys.readouterr().out
    assert "2,306,560" in text and "58,982,400" in text
    assert main(["params", "--ranks", "0"]) == 2


def test_tree_vs_forest_command(tmp_path, capsys):
    out = tmp_path / "tvf"
    assert main(["tree-vs-forest", "--n", "10", "--epochs", "3", "--ranks", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "tree_vs_forest.csv")))
    assert [r["population"] for r in rows] == ["tree", "forest"]
    assert all(0.0 <= float(r["test_accuracy"]) <= 1.0 for r in rows)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "probex", "params", "--d-w", "4", "--d-h", "4", "--d-y", "2", "--ranks", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "probex" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "probex", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2
