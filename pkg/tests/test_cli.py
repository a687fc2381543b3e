import json
import subprocess
import sys

import pytest

from conceptmil.cli import run

SYNTH = ["--d", "16", "--bags-per-class", "6", "--n-min", "6", "--n-max", "10"]
FAST = ["--epochs", "2", "--folds", "3", "--token-dim", "8", "--vocab-size", "64", "--context-length", "4",
        "--data-driven-length", "4"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--out", str(root / "data"), "--seed", "3", *SYNTH]) == 0
    return root


def cv(data, out, *extra):
    return run(["cv", "--manifest", str(data / "data" / "manifest.json"), "--bank", str(data / "data" / "bank.json"),
                "--out", str(out), *FAST, *extra])


def test_cv_prints_mean_auc_and_writes_outputs(data, capsys):
    out = data / "cv"
    assert cv(data, out, "--seed", "1") == 0
    text = capsys.readouterr().out
    assert "mean AUC" in text
    report = json.loads((out / "report.json").read_text())
    assert len(report["folds"]) == 3
    config = json.loads((out / "config.json").read_text())
    assert config["command"] == "cv" and config["train"]["epochs"] == 2 and config["train"]["seed"] == 1
    assert sorted(p.name for p in out.glob("fold*.cpk")) == ["fold0.cpk", "fold1.cpk", "fold2.cpk"]


def test_cv_with_same_seed_is_byte_identical(data):
    a, b = data / "rep_a", data / "rep_b"
    assert cv(data, a, "--seed", "7") == 0
    assert cv(data, b, "--seed", "7") == 0
    for name in ("report.json", "report.txt", "fold0.cpk", "fold1.cpk", "fold2.cpk", "fold0_log.csv"):
        if name.endswith("csv"):
            # wall time differs between runs; compare the loss columns only
            strip = lambda p: [r.split(",")[:2] for r in p.read_text().splitlines()]
            assert strip(a / name) == strip(b / name)
        else:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_toml_config_and_flag_precedence(data, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text("[train]\nepochs = 1\nlearning_rate = 0.001\nmutual_weight = 0.5\n")
    out = tmp_path / "cv"
    assert cv(data, out, "--config", str(cfg), "--mutual-weight", "0.25") == 0
    echo = json.loads((out / "config.json").read_text())["train"]
    # the FAST flags set epochs=2 and override the file; untouched keys come from the file
    assert (echo["epochs"], echo["learning_rate"], echo["mutual_weight"]) == (2, 0.001, 0.25)


def test_unknown_config_key_is_an_error(data, tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("learnin_rate = 0.1\n")
    assert cv(data, tmp_path / "cv", "--config", str(cfg)) == 1
    assert "learnin_rate" in capsys.readouterr().err


def test_train_infer_heatmap(data, tmp_path, capsys):
    d = data / "data"
    assert run(["train", "--manifest", str(d / "manifest.json"), "--bank", str(d / "bank.json"),
                "--out", str(tmp_path / "m"), *FAST]) == 0
    bag = sorted((d / "bags").glob("*.cpb"))[0]
    capsys.readouterr()
    assert run(["infer", "--checkpoint", str(tmp_path / "m" / "model.cpk"), "--bag", str(bag)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["classes"] == ["class_0", "class_1"] and abs(sum(doc["probabilities"]) - 1) < 1e-9
    assert doc["prediction"] in doc["classes"]
    assert run(["heatmap", "--checkpoint", str(tmp_path / "m" / "model.cpk"), "--bag", str(bag),
                "--class", "class_1", "--concept", "0", "--out", str(tmp_path / "h" / "map.pgm")]) == 0
    assert (tmp_path / "h" / "map.pgm").read_bytes().startswith(b"P5")
    assert json.loads((tmp_path / "h" / "map.json").read_text())["class"] == "class_1"
    assert run(["heatmap", "--checkpoint", str(tmp_path / "m" / "model.cpk"), "--bag", str(bag),
                "--class", "class_1", "--concept", "40", "--out", str(tmp_path / "h" / "x.pgm")]) == 1


def test_missing_file_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.cpk"
    assert run(["infer", "--checkpoint", str(missing), "--bag", str(missing)]) == 1
    err = capsys.readouterr().err
    assert str(missing) in err and err.count("\n") == 1


def test_preprocess_command(tmp_path, capsys):
    import numpy as np
    from PIL import Image
    img = np.full((128, 128, 3), 255, dtype=np.uint8)
    img[:, :64] = (214, 120, 190)
    Image.fromarray(img).save(tmp_path / "s.png")
    assert run(["preprocess", str(tmp_path / "s.png"), "--out", str(tmp_path / "pp"), "--patch-size", "64",
                "--min-area", "10", "--d", "8"]) == 0
    assert "tiles: 2" in capsys.readouterr().out
    assert (tmp_path / "pp" / "bag.cpb").exists()


def test_usage_errors():
    assert run(["frobnicate"]) == 2
    assert run([]) == 2
    proc = subprocess.run([sys.executable, "-m", "conceptmil", "cv"], capture_output=True, text=True)
    assert proc.returncode == 2 and "--manifest" in proc.stderr
