from __future__ import annotations

import json
import subprocess
import sys

import pytest

from proctrack.cli import main

TINY_ENCODER = {"vocab_size": 256, "d": 8, "layers": 1, "heads": 2, "ff": 16, "m_max": 128, "max_span_len": 8}


def run(capsys, *argv):
    status = main([str(a) for a in argv])
    out = capsys.readouterr()
    return status, out.out, out.err


@pytest.fixture
def corpus(tmp_path, capsys):
    train = tmp_path / "train.jsonl"
    test = tmp_path / "test.jsonl"
    pool = tmp_path / "pool.jsonl"
    assert run(capsys, "synth", "--paragraphs", 4, "--seed", 1, "--out", train, "--pool", 3, "--pool-out", pool)[0] == 0
    assert run(capsys, "synth", "--paragraphs", 3, "--seed", 2, "--out", test)[0] == 0
    return {"train": train, "test": test, "pool": pool, "dir": tmp_path}


def write_config(path, **kw):
    path.write_text(json.dumps(kw))
    return path


def test_gradcheck_crf_reports_success(capsys):
    status, out, _ = run(capsys, "gradcheck", "--module", "crf")
    report = json.loads(out)
    assert status == 0 and report["ok"] and report["max_rel_err"] < 1e-4


def test_ingest_check(corpus, capsys):
    status, out, _ = run(capsys, "ingest", "--check", corpus["train"])
    info = json.loads(out)
    assert status == 0 and info["stats"]["paragraphs"] == 4 and info["pool"] == 0
    bad = corpus["dir"] / "bad.jsonl"
    bad.write_text(corpus["train"].read_text() + "{oops\n")
    status, _, err = run(capsys, "ingest", "--check", bad)
    assert status == 2 and json.loads(err)["code"] == "format_error"
    status, _, err = run(capsys, "ingest", "--check", corpus["dir"] / "missing.jsonl")
    assert status == 4 and json.loads(err)["code"] == "io_error"


def test_synth_grid_tsv_round_trips_through_ingest(tmp_path, capsys):
    path = tmp_path / "g.tsv"
    assert run(capsys, "synth", "--paragraphs", 3, "--format", "grid_tsv", "--out", path)[0] == 0
    status, out, _ = run(capsys, "ingest", "--check", path, "--format", "grid_tsv")
    assert status == 0 and json.loads(out)["stats"]["paragraphs"] == 3


def test_eval_gold_against_itself(corpus, capsys):
    status, out, _ = run(capsys, "eval", "--gold", corpus["test"], "--pred", corpus["test"])
    flat = json.loads(out)
    assert status == 0
    values = [flat["sentence_level"][k] for k in ("cat1", "cat2", "cat3", "macro_avg", "micro_avg")]
    values += [v for c in flat["document_level"]["categories"].values() for v in c.values()]
    assert all(v == 1.0 for v in values)
    status, out, _ = run(capsys, "eval", "--gold", corpus["test"], "--pred", corpus["test"], "--format", "csv")
    assert out.startswith("metric,value\n")


def test_unknown_config_key_rejected(corpus, capsys):
    cfg = write_config(corpus["dir"] / "c.json", train=str(corpus["train"]), learning_rate=0.1)
    status, _, err = run(capsys, "train", "--config", cfg)
    assert status == 2 and json.loads(err)["code"] == "config_error"
    assert "learning_rate" in json.loads(err)["message"]


def test_train_twice_is_bit_identical(corpus, capsys, monkeypatch):
    monkeypatch.setenv("PROCTRACK_OUTPUT_ROOT", str(corpus["dir"] / "runs"))
    cfg = write_config(
        corpus["dir"] / "c.json", train=str(corpus["train"]), test=str(corpus["test"]), epochs=2, seed=5, **TINY_ENCODER
    )
    digests, dirs = [], []
    for name in ("a", "b"):
        status, out, _ = run(capsys, "train", "--config", cfg, "--run-dir", corpus["dir"] / name)
        assert status == 0
        digests.append(json.loads(out)["checkpoint_sha256"])
        dirs.append(corpus["dir"] / name)
    assert digests[0] == digests[1]
    for f in ("checkpoint.json", "report.json", "predictions.jsonl", "history.jsonl", "config.json"):
        assert (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes(), f
    manifest = json.loads((dirs[0] / "manifest.json").read_text())
    assert manifest["checkpoint_sha256"] == digests[0]
    # re-scoring stored predictions reproduces the stored report byte for byte
    again = corpus["dir"] / "again.json"
    assert run(capsys, "eval", "--gold", corpus["test"], "--pred", dirs[0] / "predictions.jsonl", "--report", again)[0] == 0
    assert again.read_bytes() == (dirs[0] / "report.json").read_bytes()
    # default run dir lands under the override root
    status, out, _ = run(capsys, "train", "--config", cfg)
    assert status == 0 and json.loads(out)["run_dir"].startswith(str(corpus["dir"] / "runs"))


def test_predict_and_augment(corpus, capsys):
    cfg = write_config(corpus["dir"] / "c.json", train=str(corpus["train"]), epochs=1, **TINY_ENCODER)
    run_dir = corpus["dir"] / "run"
    assert run(capsys, "train", "--config", cfg, "--run-dir", run_dir)[0] == 0
    ckpt = run_dir / "checkpoint.json"
    preds = corpus["dir"] / "preds.jsonl"
    assert run(capsys, "predict", "--model", ckpt, "--data", corpus["test"], "--out", preds)[0] == 0
    assert len(preds.read_text().splitlines()) == 3
    out_path = corpus["dir"] / "mixed.jsonl"
    status, out, _ = run(capsys, "augment", "--model", ckpt, "--pool", corpus["pool"], "--gold", corpus["train"], "--out", out_path)
    assert status == 0 and json.loads(out) == {"pseudo_examples": 3, "gold_examples": 4}
    rows = [json.loads(line) for line in out_path.read_text().splitlines()]
    assert sum(1 for r in rows if r.get("pseudo")) == 3
    assert run(capsys, "ingest", "--check", out_path)[0] == 0


def test_train_with_augmentation_writes_all_stages(corpus, capsys):
    cfg = write_config(
        corpus["dir"] / "c.json",
        train=str(corpus["train"]),
        pool=str(corpus["pool"]),
        augment=True,
        epochs=1,
        retrain_epochs=1,
        **TINY_ENCODER,
    )
    run_dir = corpus["dir"] / "aug"
    assert run(capsys, "train", "--config", cfg, "--run-dir", run_dir)[0] == 0
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert [s["stage"] for s in manifest["stages"]] == ["gold", "pseudo_label", "retrain"]
    assert (run_dir / "checkpoint_gold.json").exists() and (run_dir / "pseudo_labeled.jsonl").exists()


def test_story_pipeline(tmp_path, capsys):
    data = tmp_path / "stories.jsonl"
    assert run(capsys, "synth", "--story", "--paragraphs", 3, "--out", data)[0] == 0
    cfg = write_config(tmp_path / "s.json", task="story", train=str(data), test=str(data), epochs=1, **TINY_ENCODER)
    run_dir = tmp_path / "story-run"
    assert run(capsys, "train", "--config", cfg, "--run-dir", run_dir)[0] == 0
    report = json.loads((run_dir / "report.json").read_text())["story"]
    assert report["verifiability"] <= report["consistency"] <= report["accuracy"]
    preds = tmp_path / "p.jsonl"
    assert run(capsys, "predict", "--model", run_dir / "checkpoint.json", "--data", data, "--out", preds)[0] == 0
    assert preds.read_text() == (run_dir / "predictions.jsonl").read_text()
    status, _, err = run(capsys, "augment", "--model", run_dir / "checkpoint.json", "--pool", data, "--out", tmp_path / "x")
    assert status == 2


def test_task_mismatch_is_config_error(tmp_path, capsys):
    data = tmp_path / "stories.jsonl"
    run(capsys, "synth", "--story", "--paragraphs", 2, "--out", data)
    cfg = write_config(tmp_path / "s.json", task="procedural", train=str(data))
    status, _, err = run(capsys, "train", "--config", cfg)
    assert status == 2 and json.loads(err)["code"] == "config_error"


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "proctrack", "synth", "--paragraphs", "1"], capture_output=True, text=True, check=False
    )
    assert proc.returncode == 0 and json.loads(proc.stdout.splitlines()[0])["para_id"]
