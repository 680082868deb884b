import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from dndf import audio, model_io
from dndf.cli import main
from dndf.synthetic import write_audio_corpus

TINY = """\
[forest]
trees = 2
depth = 2
[train]
extractor = cnn4-desk
epochs = 2
batch = 8
[features]
sample_rate = 16000
augment = none
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_audio_corpus(root / "audio", 3, seconds=0.3, kinds=("sine440", "noise"))
    (root / "tiny.ini").write_text(TINY)
    assert main(["prepare-features", str(root / "audio"), "--out", str(root / "feat"), "--config", str(root / "tiny.ini")]) == 0
    return root


@pytest.fixture(scope="module")
def archive(corpus):
    out = corpus / "model.dndm"
    code = main(["train", "--config", str(corpus / "tiny.ini"), "--train", str(corpus / "feat/manifest.csv"), "--out", str(out)])
    assert code == 0
    return out


# --- configuration --------------------------------------------------------


def test_show_config_defaults(capsys):
    code, out, _ = run(capsys, "show-config")
    assert code == 0
    first = out.splitlines()[0]
    for item in ["trees=100", "depth=10", "batch=150", "epochs=500", "lr=0.001"]:
        assert item in first.split()


def test_unknown_config_key_names_its_line(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[forest]\ntrees = 3\n\n[train]\nlearning_rate = 0.1\n")
    code, out, err = run(capsys, "show-config", "--config", tmp_path / "c.ini")
    assert code == 2 and out == ""
    assert "line 5" in err and "learning_rate" in err


def test_bad_config_value(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[forest]\ntrees = many\n")
    code, _, err = run(capsys, "show-config", "--config", tmp_path / "c.ini")
    assert code == 2 and "line 2" in err


def test_invalid_value_reports_line(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[train]\nbatch = 8\noptimizer = rmsprop\n")
    code, _, err = run(capsys, "show-config", "--config", tmp_path / "c.ini")
    assert code == 2 and "line 3" in err


def test_seed_override(tmp_path, capsys):
    (tmp_path / "c.ini").write_text("[train]\nseed = 4\n")
    _, out, _ = run(capsys, "show-config", "--config", tmp_path / "c.ini", "--seed", 9)
    assert "seed=9" in out.split()


# --- prepare-features -----------------------------------------------------


def test_prepare_features_outputs(corpus):
    feat = corpus / "feat"
    assert (feat / "vocabulary.txt").read_text() == "noise\nsine440\n"
    rows = list(csv.reader(open(feat / "manifest.csv")))
    assert rows[0] == ["feature_path", "label_index"]
    assert len(rows) == 7
    assert sorted(int(r[1]) for r in rows[1:]) == [0, 0, 0, 1, 1, 1]
    f = audio.load_feature(feat / rows[1][0])
    assert f.values.shape == (audio.frame_count(4800), 64) and f.sample_rate == 16000


def test_prepare_features_rerun_is_byte_identical(corpus, tmp_path):
    out = tmp_path / "again"
    args = ["prepare-features", str(corpus / "audio"), "--out", str(out), "--config", str(corpus / "tiny.ini")]
    assert main(args) == 0
    first = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert main(args) == 0
    second = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert first == second
    manifest = (corpus / "feat/manifest.csv").read_bytes()
    assert (out / "manifest.csv").read_bytes() == manifest


def test_prepare_features_empty_input(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    code, _, _ = run(capsys, "prepare-features", tmp_path / "empty", "--out", tmp_path / "out")
    assert code == 0
    assert (tmp_path / "out/manifest.csv").read_text() == "feature_path,label_index\n"


def test_prepare_features_label_csv_and_holdout(tmp_path, capsys):
    paths = write_audio_corpus(tmp_path / "a", 4, seconds=0.2, kinds=("sine440", "sine2000"))
    with open(tmp_path / "labels.csv", "w") as fh:
        fh.write("path,label\n")
        for i, p in enumerate(paths):
            fh.write(f"{p.relative_to(tmp_path)},{'low' if i < 4 else 'high'}\n")
    (tmp_path / "c.ini").write_text("[features]\nsample_rate = 16000\n")
    code, _, _ = run(
        capsys,
        "prepare-features",
        tmp_path / "a",
        "--out",
        tmp_path / "o",
        "--labels",
        tmp_path / "labels.csv",
        "--test-fraction",
        0.25,
        "--config",
        tmp_path / "c.ini",
    )
    assert code == 0
    assert (tmp_path / "o/vocabulary.txt").read_text() == "high\nlow\n"
    train_rows = (tmp_path / "o/train.csv").read_text().splitlines()[1:]
    test_rows = (tmp_path / "o/test.csv").read_text().splitlines()[1:]
    assert len(train_rows) == 6 and len(test_rows) == 2
    assert sorted(r.split(",")[1] for r in test_rows) == ["0", "1"]
    assert not set(train_rows) & set(test_rows)


def test_prepare_features_skips_bad_clips(tmp_path, capsys, caplog):
    write_audio_corpus(tmp_path / "a", 1, seconds=0.2, kinds=("noise",))
    (tmp_path / "a/noise/broken.wav").write_bytes(b"not audio")
    code, _, _ = run(capsys, "prepare-features", tmp_path / "a", "--out", tmp_path / "o")
    assert code == 0 and "broken.wav" in caplog.text
    assert len((tmp_path / "o/manifest.csv").read_text().splitlines()) == 2
    code, _, _ = run(capsys, "prepare-features", tmp_path / "a", "--out", tmp_path / "o2", "--strict")
    assert code == 3


def test_prepare_features_missing_input(tmp_path, capsys):
    code, _, _ = run(capsys, "prepare-features", tmp_path / "nope", "--out", tmp_path / "o")
    assert code == 3


def test_prepare_features_threads_match_serial(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("DNDF_THREADS", "4")
    args = ["prepare-features", str(corpus / "audio"), "--out", str(tmp_path), "--config", str(corpus / "tiny.ini")]
    assert main(args) == 0
    assert (tmp_path / "manifest.csv").read_bytes() == (corpus / "feat/manifest.csv").read_bytes()


# --- train / eval / predict -----------------------------------------------


def test_train_writes_archive_and_metrics(archive):
    prefix = archive.with_suffix("")
    lines = Path(f"{prefix}.metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert rec["risk_post_pi"] <= rec["risk_pre_pi"] + 1e-10
    assert Path(f"{prefix}.metrics.log").read_text().startswith("epoch=1 ")
    assert Path(f"{prefix}.risk.png").stat().st_size > 0
    model, cfg = model_io.load(archive)
    assert cfg.tree_count == 2 and model.vocabulary == ["noise", "sine440"]


def test_train_zero_epochs(corpus, tmp_path, capsys):
    out = tmp_path / "z.dndm"
    code, _, _ = run(
        capsys, "train", "--config", corpus / "tiny.ini", "--train", corpus / "feat/manifest.csv", "--out", out, "--epochs", 0
    )
    assert code == 0 and out.exists()
    assert (tmp_path / "z.metrics.jsonl").read_text() == ""


def test_train_data_errors(corpus, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--train", tmp_path / "missing.csv", "--out", tmp_path / "m.dndm")
    assert code == 3 and err
    code, _, _ = run(capsys, "train", "--out", tmp_path / "m.dndm")
    assert code == 2
    assert not (tmp_path / "m.dndm").exists()


def test_eval_prints_percentage_and_writes_confusion(archive, corpus, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", archive, corpus / "feat/manifest.csv", "--out", tmp_path / "conf.csv")
    assert code == 0
    acc = out.strip()
    assert len(acc.split(".")[1]) == 2 and 0 <= float(acc) <= 100
    rows = list(csv.reader(open(tmp_path / "conf.csv")))
    assert rows[0][1:] == ["noise", "sine440"]
    assert sum(int(v) for r in rows[1:] for v in r[1:]) == 6
    assert (tmp_path / "conf.png").exists()


def test_eval_perfect_model_prints_100(corpus, tmp_path, capsys):
    (tmp_path / "c.ini").write_text(TINY.replace("epochs = 2", "epochs = 15"))
    out = tmp_path / "m.dndm"
    code, _, _ = run(capsys, "train", "--config", tmp_path / "c.ini", "--train", corpus / "feat/manifest.csv", "--out", out)
    assert code == 0
    code, stdout, _ = run(capsys, "eval", out, corpus / "feat/manifest.csv", "--out", tmp_path / "c.csv")
    assert (code, stdout) == (0, "100.00\n")


def test_eval_vocabulary_mismatch(archive, corpus, tmp_path, capsys):
    other = tmp_path / "other"
    other.mkdir()
    (other / "vocabulary.txt").write_text("cat\ndog\n")
    (other / "manifest.csv").write_text(
        "feature_path,label_index\n" + "".join(f"{p},0\n" for p in sorted((corpus / "feat/features").iterdir()))
    )
    code, out, err = run(capsys, "eval", archive, other / "manifest.csv")
    assert code == 4 and out == "" and "vocabulary" in err


def test_predict_sums_to_one_and_matches_feature_path(archive, corpus, capsys):
    wav = sorted((corpus / "audio/noise").glob("*.wav"))[0]
    rows = list(csv.reader(open(corpus / "feat/manifest.csv")))[1:]
    feats = {Path(r[0]).name: r for r in rows}
    feat = next(corpus / "feat" / r[0] for f, r in feats.items() if f.startswith(wav.stem + "-"))
    code, from_audio, _ = run(capsys, "predict", archive, wav)
    assert code == 0
    code, from_feature, _ = run(capsys, "predict", archive, feat)
    assert code == 0
    assert from_audio == from_feature
    lines = from_audio.splitlines()
    probs = [float(line.split("\t")[1]) for line in lines[1:]]
    assert len(probs) == 2 and abs(sum(probs) - 1) < 1e-12
    label, p = lines[0].split("\t")
    assert float(p) == max(probs) and label in ("noise", "sine440")


def test_predict_shape_mismatch(archive, tmp_path, capsys):
    audio.save_feature(tmp_path / "x.feat", audio.MelFeature(np.zeros((3, 64)), 16000))
    code, out, err = run(capsys, "predict", archive, tmp_path / "x.feat")
    assert code == 5 and out == ""


def test_predict_corrupt_archive(tmp_path, capsys):
    (tmp_path / "m.dndm").write_bytes(b"DNDM" + bytes(3))
    code, _, _ = run(capsys, "predict", tmp_path / "m.dndm", tmp_path / "m.dndm")
    assert code == 3


# --- sweep ------------------------------------------------------------------


def test_sweep_trees_with_eval(corpus, tmp_path, capsys):
    manifest = corpus / "feat/manifest.csv"
    code, out, _ = run(
        capsys, "sweep-trees", "--config", corpus / "tiny.ini", "--train", manifest, "--eval", manifest,
        "--counts", "1,2", "--out", tmp_path, "--epochs", 1,
    )
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "sweep.csv")))
    assert rows[0] == ["tree_count", "accuracy"] and [r[0] for r in rows[1:]] == ["1", "2"]
    assert out.splitlines() == [f"{r[0]}\t{r[1]}" for r in rows[1:]]
    assert (tmp_path / "trees-1.dndm").exists() and (tmp_path / "trees-2.dndm").exists()
    assert (tmp_path / "sweep.png").exists()
    code, acc, _ = run(capsys, "eval", tmp_path / "trees-1.dndm", manifest, "--out", tmp_path / "c.csv")
    assert acc.strip() == rows[1][1]


def test_sweep_trees_kfold(corpus, tmp_path, capsys):
    (tmp_path / "c.ini").write_text(TINY + "[train]\nfolds = 3\n")
    code, out, _ = run(
        capsys, "sweep-trees", "--config", tmp_path / "c.ini", "--train", corpus / "feat/manifest.csv",
        "--counts", "1", "--out", tmp_path / "s", "--epochs", 1,
    )
    assert code == 0 and out.startswith("1\t")
    assert (tmp_path / "s/trees-1.dndm").exists()


def test_sweep_bad_counts(corpus, tmp_path, capsys):
    code, _, _ = run(capsys, "sweep-trees", "--train", corpus / "feat/manifest.csv", "--counts", "a,b", "--out", tmp_path)
    assert code == 2


def test_module_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=str(Path(__file__).resolve().parents[1] / "src"))
    proc = subprocess.run(
        [sys.executable, "-m", "dndf", "show-config"], capture_output=True, text=True, env=env, cwd=tmp_path
    )
    assert proc.returncode == 0 and proc.stdout.startswith("trees=100 ")
