import csv
import hashlib
import json

import pytest

from melodysim.cli import main


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synth_and_augment(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "in"), "--pieces", "2", "--seconds", "8", "--seed", "3"]) == 0
    assert len(list((tmp_path / "in").glob("*.mid"))) == 2
    assert main(["augment", str(tmp_path / "in"), "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    assert len(list((tmp_path / "a" / "midi").rglob("*.mid"))) == 8
    assert len(list((tmp_path / "a" / "records").rglob("*.json"))) == 6
    assert main(["augment", str(tmp_path / "in"), "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    assert _sha(tmp_path / "a" / "manifest.json") == _sha(tmp_path / "b" / "manifest.json")


def test_invalid_inputs_exit_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["augment", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
    assert "no MIDI files" in capsys.readouterr().err
    assert main(["augment", str(tmp_path / "empty"), "--out", str(tmp_path / "o"), "--versions", "0"]) == 2
    assert main(["render", str(tmp_path / "missing")]) == 2
    (tmp_path / "x.mid").write_bytes(b"garbage")
    assert main(["compare", str(tmp_path / "x.mid"), str(tmp_path / "x.mid"), "--baseline", "chroma",
                 "--out", str(tmp_path / "c")]) == 2
    assert main(["compare", str(tmp_path / "nope.mid"), str(tmp_path / "x.mid"), "--baseline", "chroma"]) == 2


@pytest.fixture(scope="module")
def trained(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ck") / "model.ck"
    assert main(["train", str(small_corpus.root), "--out", str(out), "--epochs", "2", "--seed", "4"]) == 0
    return out


def test_train_writes_checkpoint_and_losses(trained):
    assert trained.exists() and trained.with_name("model.ck.json").exists()
    rows = list(csv.DictReader(open(trained.with_suffix(".loss.csv"))))
    assert [int(r["epoch"]) for r in rows] == [0, 1]


def test_train_is_deterministic(small_corpus, trained, tmp_path):
    again = tmp_path / "again.ck"
    assert main(["train", str(small_corpus.root), "--out", str(again), "--epochs", "2", "--seed", "4"]) == 0
    assert again.read_bytes() == trained.read_bytes()


def test_resume_continues_epochs(small_corpus, trained, tmp_path):
    out = tmp_path / "resumed.ck"
    assert main(["train", str(small_corpus.root), "--out", str(out), "--resume", str(trained), "--epochs", "1"]) == 0
    side = json.loads(out.with_name("resumed.ck.json").read_text())
    assert side["epoch"] == 3 and [h["epoch"] for h in side["history"]] == [0, 1, 2]


def test_train_config_errors(small_corpus, tmp_path):
    assert main(["train", str(small_corpus.root), "--out", str(tmp_path / "m"), "--margin", "0"]) == 2
    assert main(["train", str(small_corpus.root), "--out", str(tmp_path / "m"), "--holdout", "2"]) == 2
    assert main(["train", str(small_corpus.root), "--out", str(tmp_path / "m"), "--tracks", "Nope"]) == 2


def test_compare_self(small_corpus, trained, tmp_path, capsys):
    midi = small_corpus.root / small_corpus.tracks["Track00000"].versions["original"].midi
    out = tmp_path / "cmp"
    assert main(["compare", str(midi), str(midi), "--checkpoint", str(trained), "--out", str(out),
                 "--gamma", "0.5", "--prop-threshold", "0.2"]) == 0
    verdict = json.loads((out / "verdict.json").read_text())
    assert set(verdict) >= {"similar", "row_fraction", "col_fraction", "key_shift"}
    assert (out / "similarity.csv").exists() and (out / "similarity.pgm").exists()
    assert main(["compare", str(midi), str(midi), "--baseline", "chroma", "--out", str(out)]) == 0
    assert json.loads((out / "baseline.json").read_text())["normalized_cost"] == 0.0
    assert main(["compare", str(midi), str(midi), "--out", str(out)]) == 2
    assert main(["compare", str(midi), str(midi), "--checkpoint", str(trained), "--gamma", "1.5"]) == 2


def test_evaluate_command(small_corpus, trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", str(small_corpus.root), "--checkpoint", str(trained), "--out", str(out),
                 "--baseline", "chroma,pitch"]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert doc["n_pairs"] == 24 and set(doc["baseline"]) == {"chroma", "pitch"}
    assert "Song level" in (out / "report.txt").read_text()
    bad = tmp_path / "bad.ck"
    bad.write_bytes(b"junk")
    assert main(["evaluate", str(small_corpus.root), "--checkpoint", str(bad), "--out", str(out)]) == 2
