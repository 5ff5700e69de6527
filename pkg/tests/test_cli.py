import csv
import json

import numpy as np
import pytest

from dsbel.checkpoint import load_checkpoint, load_ensemble_payload
from dsbel.cli import main, parse_config_text, UsageError
from dsbel.ingestion import read_pgm
from dsbel.model import ModelConfig, build_model

TINY_CFG = """
# tiny network for fast CLI runs
stm_widths = 4,4,4
side = 32
fusion_width = 32
epochs = 4
learning_rate = 0.03
momentum = 0.9
dropout = 0
pretrain_epochs = 1
surrogate_per_class = 4
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return p


def run(*argv):
    return main([str(a) for a in argv])


# ---- config parsing -----------------------------------------------------------

def test_parse_config_splits_train_and_model_keys():
    t, m = parse_config_text("epochs=3\naugment=no\nstm_widths=1 2 3\nside=16\n# comment\n\n")
    assert t == {"epochs": 3, "augment": False}
    assert m == {"stm_widths": (1, 2, 3), "side": 16}


@pytest.mark.parametrize("text,needle", [("colour=blue", "colour"), ("epochs=three", "epochs"),
                                         ("just words", "key=value"), ("augment=maybe", "augment")])
def test_parse_config_errors(text, needle):
    with pytest.raises(UsageError, match=needle):
        parse_config_text(text)


# ---- convert ----------------------------------------------------------------------

def test_convert_two_files(tmp_path, capsys):
    src = tmp_path / "bin"
    (src / "sub").mkdir(parents=True)
    (src / "a.exe").write_bytes(bytes(range(9)))
    (src / "sub" / "b.elf").write_bytes(b"\x7fELF" * 5)
    assert run("convert", "--in", src, "--out", tmp_path / "img") == 0
    assert read_pgm(tmp_path / "img" / "a.exe.pgm").pixels.tolist() == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
    assert read_pgm(tmp_path / "img" / "sub" / "b.elf.pgm").width == 5


def test_convert_empty_dir_warns(tmp_path, caplog):
    (tmp_path / "empty").mkdir()
    assert run("convert", "--in", tmp_path / "empty", "--out", tmp_path / "o") == 0
    assert "no files" in caplog.text


def test_convert_bad_file_listed_and_exit_one(tmp_path, capsys):
    src = tmp_path / "bin"
    src.mkdir()
    (src / "ok.bin").write_bytes(b"abc")
    (src / "empty.bin").write_bytes(b"")
    assert run("convert", "--in", src, "--out", tmp_path / "o") == 1
    assert "empty.bin" in capsys.readouterr().err
    assert (tmp_path / "o" / "ok.bin.pgm").exists()


def test_convert_missing_input_is_data_error(tmp_path):
    assert run("convert", "--in", tmp_path / "nope", "--out", tmp_path / "o") == 1


# ---- usage errors ---------------------------------------------------------------

def test_train_without_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        run("train", "--synthetic", "10")
    assert e.value.code == 2


def test_train_unknown_config_key_names_it(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs=1\nwarp_drive=on\n")
    assert run("train", "--synthetic", 10, "--config", bad, "--out", tmp_path / "m.dsbl") == 2
    assert "warp_drive" in capsys.readouterr().err


def test_train_invalid_model_value_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stm_widths=4,4\n")
    assert run("train", "--synthetic", 10, "--config", bad, "--out", tmp_path / "m.dsbl") == 2


# ---- train ----------------------------------------------------------------------

def test_train_zero_epochs_checkpoint_equals_initialisation(tmp_path):
    cfg = tmp_path / "zero.cfg"
    cfg.write_text("stm_widths=2,2,2\nside=16\nfusion_width=8\nepochs=0\npretrain_epochs=0\n")
    out = tmp_path / "m.dsbl"
    assert run("train", "--synthetic", 6, "--seed", 4, "--config", cfg, "--out", out) == 0
    init = build_model(ModelConfig(stm_widths=(2, 2, 2), side=16, fusion_width=8, seed=4))
    loaded = load_checkpoint(out)
    assert {n: t.data.tobytes() for n, t in loaded.params.items()} == \
           {n: t.data.tobytes() for n, t in init.params.items()}
    assert (tmp_path / "m.history.csv").read_text() == "epoch,train_loss,train_acc,val_loss,val_acc\n"


def train_and_eval(root, cfg_file, seed=7):
    root.mkdir()
    model = root / "model.dsbl"
    assert run("train", "--synthetic", 12, "--seed", seed, "--config", cfg_file, "--out", model) == 0
    assert run("fit-ensemble", "--model", model) == 0
    assert run("eval", "--model", model, "--report", root / "report") == 0
    return model


def test_train_writes_artifacts_and_manifest(tmp_path, cfg_file):
    model = train_and_eval(tmp_path / "a", cfg_file)
    folder = model.parent
    assert {p.name for p in folder.iterdir()} >= {
        "model.dsbl", "model.final.dsbl", "model.history.csv", "model.dsbl.manifest.json"}
    manifest = json.loads((folder / "model.dsbl.manifest.json").read_text())
    assert manifest["subcommand"] == "train" and manifest["seed"] == 7
    assert manifest["inputs"] == {"synthetic": "12"}
    assert manifest["config"]["model"]["stm_widths"] == [4, 4, 4]
    assert manifest["config"]["train"]["augment"] is False
    assert len((folder / "model.history.csv").read_text().splitlines()) == 5
    report = folder / "report"
    assert {"report.csv", "roc.svg", "pr.svg", "pca.svg", "scores.csv"} <= {p.name for p in report.iterdir()}
    rows = list(csv.DictReader((report / "report.csv").read_text().splitlines()))
    assert [r["model"] for r in rows] == ["cnn", "svm", "mlp", "adaboostm1", "dsbel"]
    assert load_ensemble_payload(model)["n_features"] == 32


def test_seeded_runs_are_byte_identical(tmp_path, cfg_file):
    a = train_and_eval(tmp_path / "a", cfg_file)
    b = train_and_eval(tmp_path / "b", cfg_file)
    for rel in ("model.history.csv", "report/report.csv", "report/roc.svg", "report/pr.svg",
                "report/pca.svg", "model.dsbl", "model.final.dsbl"):
        assert (a.parent / rel).read_bytes() == (b.parent / rel).read_bytes(), rel


def test_eval_twice_is_identical_and_report_rebuilds(tmp_path, cfg_file):
    model = train_and_eval(tmp_path / "a", cfg_file)
    assert run("eval", "--model", model, "--report", tmp_path / "again") == 0
    first = (model.parent / "report" / "report.csv").read_bytes()
    assert (tmp_path / "again" / "report.csv").read_bytes() == first
    assert run("report", "--scores", tmp_path / "again" / "scores.csv", "--out", tmp_path / "rebuilt") == 0
    assert (tmp_path / "rebuilt" / "report.csv").read_bytes() == first


def test_features_row_count_matches_split(tmp_path, cfg_file):
    model = train_and_eval(tmp_path / "a", cfg_file)
    out = tmp_path / "feat.csv"
    assert run("features", "--model", model, "--split", "test", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split(",")[:3] == ["label", "f0", "f1"] and len(lines[0].split(",")) == 33
    assert len(lines) - 1 == 2 * 3  # 30% of 12 per class
    assert run("fit-ensemble", "--model", model, "--features", out, "--out", tmp_path / "e.dsbl") == 0


def test_eval_ensemble_mode_needs_ensemble(tmp_path, cfg_file, capsys):
    model = tmp_path / "m.dsbl"
    assert run("train", "--synthetic", 8, "--config", cfg_file, "--out", model) == 0
    assert run("eval", "--model", model, "--mode", "ensemble", "--report", tmp_path / "r") == 1
    assert "fit-ensemble" in capsys.readouterr().err
    assert run("eval", "--model", model, "--mode", "cnn", "--report", tmp_path / "r") == 0


def test_fit_ensemble_dimension_mismatch(tmp_path, cfg_file):
    model = tmp_path / "m.dsbl"
    assert run("train", "--synthetic", 8, "--config", cfg_file, "--out", model) == 0
    feats = tmp_path / "f.csv"
    feats.write_text("label,f0,f1\n0,1.0,2.0\n1,3.0,4.0\n0,1.5,2.5\n1,3.5,4.5\n")
    assert run("fit-ensemble", "--model", model, "--features", feats) == 1


def test_eval_overfit_tiny_model_on_train_split(tmp_path):
    cfg = tmp_path / "overfit.cfg"
    cfg.write_text("stm_widths=4,4,4\nside=32\nfusion_width=32\nepochs=30\nlearning_rate=0.03\n"
                   "momentum=0.9\ndropout=0\npretrain_epochs=0\n")
    model = tmp_path / "m.dsbl"
    assert run("train", "--synthetic", 12, "--seed", 3, "--config", cfg, "--out", model) == 0
    final = tmp_path / "m.final.dsbl"
    report = tmp_path / "r"
    assert run("eval", "--model", final, "--synthetic", 12, "--seed", 3, "--split", "train",
               "--mode", "cnn", "--report", report) == 0
    row = next(csv.DictReader((report / "report.csv").read_text().splitlines()))
    assert float(row["accuracy"]) >= 99.0


def test_train_from_pgm_directory(tmp_path, cfg_file):
    from dsbel.ingestion import generate_synthetic_corpus, save_dataset
    save_dataset(generate_synthetic_corpus(6, side=32, seed=1), tmp_path / "data")
    model = tmp_path / "m.dsbl"
    assert run("train", "--data", tmp_path / "data", "--config", cfg_file, "--out", model) == 0
    manifest = json.loads((tmp_path / "m.dsbl.manifest.json").read_text())
    assert manifest["inputs"]["data"] == str(tmp_path / "data")
    assert manifest["config"]["train"]["augment"] is True
    assert run("eval", "--model", model, "--mode", "cnn", "--report", tmp_path / "r") == 0


def test_missing_data_dir_is_data_error(tmp_path, cfg_file):
    assert run("train", "--data", tmp_path / "nope", "--config", cfg_file, "--out", tmp_path / "m.dsbl") == 1


def test_corrupt_model_is_data_error(tmp_path):
    bad = tmp_path / "bad.dsbl"
    bad.write_bytes(b"DSBL\x01\x00garbage")
    assert run("eval", "--model", bad, "--synthetic", 6, "--report", tmp_path / "r") == 1
