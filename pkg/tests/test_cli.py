import json

import pytest

from glom import __version__
from glom.cli import main


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synth"
    assert main(["synth", "--classes", "2", "--per-class", "6", "--size", "32", "--seed", "3", "--out", str(out)]) == 0
    return out


def run_json(directory):
    return json.loads((directory / "run.json").read_text())


def test_synth_writes_images_manifest_and_provenance(dataset):
    assert len(list(dataset.rglob("*.png"))) == 12
    assert (dataset / "manifest.csv").exists()
    rec = run_json(dataset)
    assert rec["status"] == "ok" and rec["seed"] == 3 and rec["version"] == __version__
    assert rec["config"]["per_class"] == 6


def test_synth_four_classes(tmp_path):
    assert main(["synth", "--classes", "4", "--per-class", "2", "--size", "32", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir() if p.is_dir()) == ["endo", "endoMes", "mesangial", "normal"]
    assert len(list(tmp_path.rglob("*.png"))) == 8


def test_synth_is_byte_reproducible(tmp_path):
    args = ["synth", "--per-class", "2", "--size", "32", "--seed", "1", "--out"]
    main(args + [str(tmp_path / "a")])
    main(args + [str(tmp_path / "b")])
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        if rel.name != "run.json":
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--data", str(dataset), "--k", "3", "--fold", "1", "--epochs", "2", "--seed", "5",
                 "--bn-recalibrate", "8", "--out", str(out)])
    assert code == 0
    return out


def test_train_outputs(trained):
    assert {"model.glom", "traces.csv", "plan.json", "run.json"} <= {p.name for p in trained.iterdir()}
    assert len((trained / "traces.csv").read_text().splitlines()) == 3


@pytest.fixture(scope="module")
def features(trained, dataset):
    path = trained / "feats.csv"
    assert main(["features", "--checkpoint", str(trained / "model.glom"), "--data", str(dataset),
                 "--out", str(path)]) == 0
    return path


def test_features_csv(features):
    lines = features.read_text().splitlines()
    assert len(lines) == 13 and len(lines[0].split(",")) == 130


def test_svm_fit_and_grid(features, tmp_path):
    assert main(["svm-fit", "--features", str(features), "--kernel", "rbf", "--C", "10", "--gamma", "0.01",
                 "--out", str(tmp_path / "m.gsvm")]) == 0
    assert (tmp_path / "m.gsvm").read_bytes()[:4] == b"GSVM"
    assert run_json(tmp_path)["status"] == "ok"
    grid = tmp_path / "g.json"
    assert main(["svm-grid", "--features", str(features), "--kernel", "rbf", "--k", "3", "--seed", "0",
                 "--out", str(grid)]) == 0
    doc = json.loads(grid.read_text())
    assert len(doc["cells"]) == 30 and doc["K"] == 3
    first = grid.read_bytes()
    main(["svm-grid", "--features", str(features), "--kernel", "rbf", "--k", "3", "--seed", "0", "--out", str(grid)])
    assert grid.read_bytes() == first


def test_tsne_command(features, tmp_path):
    assert main(["tsne", "--features", str(features), "--perplexity", "3", "--iterations", "60", "--seed", "0",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "tsne.csv").exists() and (tmp_path / "tsne.svg").exists()


def test_cv_and_report(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["cv", "--pipeline", "both", "--data", str(dataset), "--k", "2", "--epochs", "1", "--seed", "7",
                 "--kernel", "linear", "--bn-recalibrate", "4", "--out", str(out)])
    assert code == 0
    for pipe in ("cnn-mlp", "cnn-svm"):
        doc = json.loads((out / pipe / "report.json").read_text())
        assert len(doc["per_fold"]) == 2 and doc["split"] == "50/50"
    assert (out / "checkpoints" / "fold1.glom").exists()
    capsys.readouterr()
    assert main(["report", str(out), "--out", str(tmp_path / "table.txt")]) == 0
    table = capsys.readouterr().out
    assert "50/50" in table and "(±" in table


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"per_class": 3, "size": 32, "seed": 4}))
    assert main(["synth", "--config", str(cfg), "--per-class", "1", "--out", str(tmp_path / "d")]) == 0
    rec = run_json(tmp_path / "d")
    assert rec["config"]["per_class"] == 1 and rec["config"]["size"] == 32 and rec["seed"] == 4
    assert len(list((tmp_path / "d").rglob("*.png"))) == 2


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["synth", "--bogus", "--out", str(tmp_path)]) == 2
    assert main(["synth", "--out", str(tmp_path)]) == 2  # no seed
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["synth", "--config", str(bad), "--seed", "1", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err


def test_workflow_failure_exit_1_still_records(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["svm-fit", "--features", str(tmp_path / "missing.csv"), "--out", str(out / "m.gsvm")]) == 1
    assert "error" in capsys.readouterr().err
    rec = run_json(out)
    assert rec["status"] == "failed" and "error" in rec


def test_version(capsys):
    assert main(["--version"]) == 0
    assert capsys.readouterr().out.strip() == f"glom {__version__}"
